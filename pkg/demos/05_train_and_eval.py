"""Train a small network for a few hundred steps and evaluate it."""

import numpy as np

from latticeflow.data import SceneSpec, gen_scene, preprocess
from latticeflow.metrics import compute_metrics
from latticeflow.model import NetworkConfig, SceneFlowNet, evaluate, fit_base_scale, train

spec = SceneSpec(num_objects=3)
train_set = [preprocess(gen_scene(spec, s), n_samples=1024, seed=s) for s in range(3)]
held_out = [preprocess(gen_scene(spec, 100 + s), n_samples=1024, seed=s) for s in range(3)]

s0 = fit_base_scale(train_set)
cfg = NetworkConfig(base_scale=s0, widths=(16, 24, 32, 48))
print("base scale", round(s0, 3), "parameters", SceneFlowNet(cfg).num_params)

state, curve = train(train_set, cfg, epochs=100, lr=1e-3, lr_final=1e-5, held_out=held_out, eval_every=25,
                     augment_shift=1.0, augment_yaw=np.pi, augment_steps=200)
for entry in curve[24::25]:
    print(entry)

net = state.net
print("train EPE3D", round(evaluate(net, train_set), 4), "held-out EPE3D", round(evaluate(net, held_out), 4))
pred = np.concatenate([net.predict(p) for p in held_out])
gt = np.concatenate([p.gt_flow for p in held_out])
print(compute_metrics(pred, gt).to_table())
