"""Dress rehearsal for the seeded learnability/ablation checks; not packaged."""
import sys
import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(1)

from csilab import storage
from csilab.model import ModelConfig, build_model
from csilab.training import Corpus, Phase1Config, Phase2Config, run_phase1, run_phase2
from csilab.evaluate import confidence_mae, run_zero_shot, run_baselines

root = Path(sys.argv[1] if len(sys.argv) > 1 else "/root/pilot7b")

coarse = storage.read_dataset(root / "indoor-los_coarse_train.csids")
fine = storage.read_dataset(root / "indoor-los_fine_train.csids")
coarse_test = storage.read_dataset(root / "indoor-los_coarse_test.csids")
fine_test = storage.read_dataset(root / "indoor-los_fine_test.csids")
corpus = Corpus(coarse=[coarse], fine=[fine])
train_eval = storage.Dataset(name="train128", values=coarse.values[:128],
                             grid=coarse.grid, geometry=coarse.geometry,
                             split="train", seed=coarse.seed)

MODEL = dict(hidden_dim=64, enc_depth=4, dec_depth=2, heads=4,
             experts_total=8, experts_active=2, expert_dim=128)
P1 = dict(seed=7, epochs=64)  # 64 epochs x 32 steps/epoch = 2048 steps
T0 = time.time()


def stamp(msg):
    print(f"[{time.time()-T0:6.0f}s] {msg}", flush=True)


def task_mean(report):
    by_task = {}
    for row in report.rows:
        by_task.setdefault(row.task, []).append(row.nmse_db)
    per_task = {t: float(np.mean(v)) for t, v in by_task.items()}
    return float(np.mean(list(per_task.values()))), per_task


def quiet(_msg):
    pass


# --- criterion 7: dynamic-ratio, task-gated arm ---
stamp("training dynamic/task arm (2048 steps)")
dyn = build_model(ModelConfig(**MODEL), seed=7)
dyn, _ = run_phase1(dyn, corpus, Phase1Config(**P1), log=quiet)
stamp("dynamic arm done")

tr, _ = run_zero_shot(dyn, [train_eval], [], ratios=("low",), snrs=(20.0,),
                      with_confidence=False)
te, _ = run_zero_shot(dyn, [coarse_test], [], ratios=("low",), snrs=(20.0,),
                      with_confidence=False)
base = run_baselines([coarse_test], [], ratios=("low",), snrs=(20.0,))
stamp(f"c7: train128 cp-t {tr.rows[0].nmse_db:.2f} dB (need <= -15) | "
      f"test cp-t {te.rows[0].nmse_db:.2f} vs baseline "
      f"{base.rows[0].nmse_db:.2f} (need margin >= 3)")

# --- criterion 8: confidence calibration on the dynamic arm ---
cal = Phase1Config(seed=7, mask_ratio=(0.25, 0.50),
                   pilot_freq=(1.0 / 24.0, 1.0 / 12.0), snr=(10.0, 20.0))
dyn, _ = run_phase2(dyn, corpus, cal, Phase2Config(epochs=100, tasks=(2, 3, 4)),
                    log=quiet)
stamp("phase 2 done")
rep, _ = run_zero_shot(dyn, [coarse_test], [fine_test])
mae = confidence_mae(rep)
all_true = np.array([t for pairs in rep.conf_pairs.values() for _, t in pairs])
all_pred = np.array([p for pairs in rep.conf_pairs.values() for p, _ in pairs])
global_mae = float(np.mean(np.abs(all_true - all_true.mean())))
stamp(f"c8: MAE {mae['overall']:.2f} (need <= 6 and < global-mean "
      f"{global_mae:.2f}) | per-task { {k: round(v, 2) for k, v in mae.items()} }")
for task, pairs in sorted(rep.conf_pairs.items()):
    true = np.array([t for _, t in pairs])
    pred = np.array([p for p, _ in pairs])
    stamp(f"  {task}: pred [{pred.min():.1f},{pred.max():.1f}] "
          f"mean {pred.mean():.1f} | true [{true.min():.1f},{true.max():.1f}] "
          f"mean {true.mean():.1f}")

dyn_full, _ = run_zero_shot(dyn, [coarse_test], [fine_test],
                            with_confidence=False)
dyn_mean, dyn_per = task_mean(dyn_full)

# --- criterion 9a: unified gating arm ---
stamp("training unified-gating arm (2048 steps)")
uni = build_model(ModelConfig(gating="unified", **MODEL), seed=7)
uni, _ = run_phase1(uni, corpus, Phase1Config(**P1), log=quiet)
uni_full, _ = run_zero_shot(uni, [coarse_test], [fine_test],
                            with_confidence=False)
uni_mean, uni_per = task_mean(uni_full)
stamp(f"c9a: unified mean {uni_mean:.2f} vs task {dyn_mean:.2f} "
      f"(need unified >= task) | unified per-task "
      f"{ {k: round(v, 2) for k, v in uni_per.items()} } | task per-task "
      f"{ {k: round(v, 2) for k, v in dyn_per.items()} }")

# --- criterion 9b: fixed-ratio arm at unseen ratio 0.375 ---
stamp("training fixed-ratio arm (2048 steps)")
fix = build_model(ModelConfig(**MODEL), seed=7)
fix, _ = run_phase1(fix, corpus, Phase1Config(fixed_ratio=True, **P1), log=quiet)
fix_rep, _ = run_zero_shot(fix, [coarse_test], [], ratios=(0.375,),
                           snrs=(20.0,), with_confidence=False)
dyn_rep, _ = run_zero_shot(dyn, [coarse_test], [], ratios=(0.375,),
                           snrs=(20.0,), with_confidence=False)
fix_mean = float(np.mean([r.nmse_db for r in fix_rep.rows]))
dyn_mean375 = float(np.mean([r.nmse_db for r in dyn_rep.rows]))
stamp(f"c9b: fixed @0.375 {fix_mean:.2f} vs dynamic {dyn_mean375:.2f} "
      f"(need fixed > dynamic) | fixed rows "
      f"{[round(r.nmse_db, 2) for r in fix_rep.rows]} | dynamic rows "
      f"{[round(r.nmse_db, 2) for r in dyn_rep.rows]}")
stamp("dress rehearsal complete")
