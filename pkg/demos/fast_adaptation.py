"""Meta-train a small ensemble briefly and compare few-shot adaptation with a random start.

Run: python demos/fast_adaptation.py   (about a minute)
"""

import numpy as np

from metampc import meta, seqmodel
from metampc.experiments import query_loss_after_adaptation
from metampc.seqmodel import ModelConfig
from metampc.tasks import FourierActionSpec, GeneratorConfig, ParamRanges, generate_tasks

model = ModelConfig(hidden_size=16, head_size=16)
source = meta.OnlineTaskSource(ParamRanges(), FourierActionSpec(), GeneratorConfig(n=model.n), seed=1)
init = meta.init_ensemble_weights(model, [11, 12])

config = meta.MetaConfig(K_inner=3, alpha=1e-2, beta=0.1, tasks_per_batch=4, episodes=60)
result = meta.pretrain(config, source, init)
losses = [loss for _, loss, _ in result.history]
print(f"meta-loss: first 10 episodes {np.mean(losses[:10]):.3f}, last 10 {np.mean(losses[-10:]):.3f}")

held_out = generate_tasks(ParamRanges(), FourierActionSpec(), GeneratorConfig(n=model.n), 999, range(5))
for i, task in enumerate(held_out):
    learned = query_loss_after_adaptation(result.final, task, 3, 1e-2)
    scratch = query_loss_after_adaptation(init, task, 3, 1e-2)
    print(f"held-out task {i}: query loss after 3 steps, meta start {learned:.3f}, random start {scratch:.3f}")

prediction = seqmodel.forward(result.final, held_out[0].windows[:1])
print("member predictions for one window (d v_x, d v_y, d omega):")
print(np.array2string(prediction[:, 0], precision=3))
