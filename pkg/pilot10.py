"""Ablation-direction pilot at the 4000-step budget; not packaged."""
import sys
import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(1)

from csilab import storage
from csilab.model import ModelConfig, build_model
from csilab.training import Corpus, Phase1Config, run_phase1
from csilab.evaluate import run_zero_shot

root = Path(sys.argv[1] if len(sys.argv) > 1 else "/root/pilot7b")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 4000

coarse = storage.read_dataset(root / "indoor-los_coarse_train.csids")
fine = storage.read_dataset(root / "indoor-los_fine_train.csids")
coarse_test = storage.read_dataset(root / "indoor-los_coarse_test.csids")
fine_test = storage.read_dataset(root / "indoor-los_fine_test.csids")
corpus = Corpus(coarse=[coarse], fine=[fine])

MODEL = dict(hidden_dim=64, enc_depth=4, dec_depth=2, heads=4,
             experts_total=8, experts_active=2, expert_dim=128)
P1 = Phase1Config(seed=7, epochs=steps // 32)
T0 = time.time()


def stamp(msg):
    print(f"[{time.time()-T0:6.0f}s] {msg}", flush=True)


def quiet(_msg):
    pass


def breakdown(tag, report):
    by_task = {}
    by_setting = {}
    for row in report.rows:
        by_task.setdefault(row.task, []).append(row.nmse_db)
        by_setting[(row.task, row.ratio, row.snr_db)] = row.nmse_db
    per_task = {t: float(np.mean(v)) for t, v in sorted(by_task.items())}
    mean = float(np.mean(list(per_task.values())))
    stamp(f"{tag}: mean {mean:.2f} | per-task "
          f"{ {k: round(v, 2) for k, v in per_task.items()} }")
    for key in sorted(by_setting):
        stamp(f"  {tag} {key}: {by_setting[key]:.2f}")
    return mean, per_task


def arm(tag, model):
    rep, _ = run_zero_shot(model, [coarse_test], [fine_test],
                           with_confidence=False)
    mean, per = breakdown(tag, rep)
    rep375, _ = run_zero_shot(model, [coarse_test], [], ratios=(0.375,),
                              snrs=(20.0,), with_confidence=False)
    m375 = float(np.mean([r.nmse_db for r in rep375.rows]))
    stamp(f"{tag} @0.375: {m375:.2f} | rows "
          f"{[round(r.nmse_db, 2) for r in rep375.rows]}")
    return mean, m375


task = build_model(ModelConfig(**MODEL), seed=7)
saved = torch.load(root / "pilot_model.pt", weights_only=True)["state"]
task.load_state_dict(
    {k: v for k, v in saved.items() if not k.startswith("conf_")},
    strict=False)
task.eval()
stamp(f"task arm loaded (4000-step checkpoint); budget {steps} steps")
task_mean, task_375 = arm("task", task)

stamp("training unified arm")
uni = build_model(ModelConfig(gating="unified", **MODEL), seed=7)
uni, _ = run_phase1(uni, corpus, P1, log=quiet)
uni_mean, _ = arm("unified", uni)
stamp(f"c9a at {steps} steps: unified {uni_mean:.2f} vs task {task_mean:.2f} "
      f"(need unified >= task) -> {'OK' if uni_mean >= task_mean else 'VIOLATED'}")

stamp("training fixed-ratio arm")
fix = build_model(ModelConfig(**MODEL), seed=7)
fix, _ = run_phase1(fix, corpus, Phase1Config(seed=7, epochs=steps // 32,
                                              fixed_ratio=True), log=quiet)
_, fix_375 = arm("fixed", fix)
stamp(f"c9b at {steps} steps: fixed @0.375 {fix_375:.2f} vs dynamic "
      f"{task_375:.2f} (need fixed > dynamic) -> "
      f"{'OK' if fix_375 > task_375 else 'VIOLATED'}")
stamp("done")
