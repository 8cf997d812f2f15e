"""
Synthetic scenes, text prompts and the trajectory codec
=======================================================

Generate a few scenes, print their language descriptions and show how a
ground-truth trajectory becomes a token sequence and back.
"""

import numpy as np

from gpvl.promptgen import build_vocabulary, decode_trajectory, describe_scene, gt_caption, scene_corpus
from gpvl.scene import generate_dataset

scenes = generate_dataset(4, seed=0)
for s in scenes:
    print(s.scene_id, s.ego.command.value, len(s.agents), "agents", len(s.map), "map elements")

# the four text views of one scene
bundle = describe_scene(scenes[0])
print(bundle.det_text)
print(bundle.motion_text)
print(bundle.map_text)
print(bundle.caption_text)
print(bundle.nav_text)

# the vocabulary holds the template words plus one token per 0.1 m grid value
vocab = build_vocabulary(scene_corpus(scenes))
print("vocabulary size", len(vocab))

caption = gt_caption(scenes[0].ego, vocab)
print(vocab.decode_ids(caption.ids))

# decoding inverts the codec up to the 0.05 m quantisation bound
payload = (caption.ids[0],) + caption.ids[2:]
back = np.array(decode_trajectory(payload, vocab))
print("max round-trip error", np.abs(back - np.array(scenes[0].ego.gt_trajectory)).max())
