"""Run the prototype-discovery loop on a handful of synthetic scenes.

Small settings so it finishes in about a minute on one core:

    python3 notebooks/loop_demo.py [num_scenes] [iterations]
"""

import sys

from proto3d import pipeline as P
from proto3d.quantize import parse_scene
from proto3d.synth import CATEGORY_NAMES, SynthConfig, generate_scene

n_scenes = int(sys.argv[1]) if len(sys.argv) > 1 else 12
iters = int(sys.argv[2]) if len(sys.argv) > 2 else 2

cfg = P.PipelineConfig(grid_resolution=(32, 32, 32), K_max=16, mining_rounds=2, top_n=8, top_retrievals=40,
                       em_iters=5, epochs=10, eval_k=5, pool_size=40)
raw = [generate_scene(0, SynthConfig(), index=i) for i in range(n_scenes)]
scenes = P.prepare_scenes(raw, cfg)
state, reports = P.run(scenes, cfg, iters)

print("iter  meanAP  LIN-MATCH  prec@k  prototypes")
for r in reports:
    print(f"{r.iteration:4d}  {r.mean_ap:6.3f}  {r.linmatch_accuracy:9.3f}  {r.precision_at_10:6.3f}  "
          f"{r.dictionary_size:10d}")

# parse the first scene with the final detector and dictionary
s = scenes[0]
f = None if state.transform.is_identity() else state.transform
parse = parse_scene(s.grid, state.detector, state.dictionary, cfg.rots, transform=f,
                    extract=lambda g, b: s.object_tensor(b), proposals=list(state.detections[0]))
print("\nscene 0 ground truth:")
for o in s.gt.objects:
    print(f"  {CATEGORY_NAMES[o.category]:8s} yaw {o.yaw_deg:6.1f}  box {[round(v, 2) for v in o.box.to_list()]}")
print("scene 0 parse:")
for rec in parse.records:
    print(f"  prototype {rec.prototype:2d}  R {rec.rotation_deg:5.1f}  conf {rec.confidence:.2f}  "
          f"box {[round(v, 2) for v in rec.box.to_list()]}")
