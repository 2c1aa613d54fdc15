"""Pilot for the desk-scale learnability criterion; not part of the package."""
import sys
import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(1)

from csilab import channel, storage
from csilab.model import ModelConfig, build_model
from csilab.training import Corpus, Phase1Config, Phase2Config, run_phase1, run_phase2
from csilab.evaluate import confidence_mae, run_zero_shot, run_baselines

root = Path(sys.argv[1] if len(sys.argv) > 1 else "/root/pilot7b")
max_steps = int(sys.argv[2]) if len(sys.argv) > 2 else 4000
root.mkdir(exist_ok=True)
presets = [channel.PRESETS["indoor-los"]]
if not (root / "indoor-los_coarse_train.csids").exists():
    channel.build_corpus(presets, (512, 64, 128), root, seed=7)

coarse = storage.read_dataset(root / "indoor-los_coarse_train.csids")
fine = storage.read_dataset(root / "indoor-los_fine_train.csids")
coarse_test = storage.read_dataset(root / "indoor-los_coarse_test.csids")
fine_test = storage.read_dataset(root / "indoor-los_fine_test.csids")
corpus = Corpus(coarse=[coarse], fine=[fine])

cfg = ModelConfig(hidden_dim=64, enc_depth=4, dec_depth=2, heads=4,
                  experts_total=8, experts_active=2, expert_dim=128)
model = build_model(cfg, seed=7)

train_eval = storage.Dataset(name="train128", values=coarse.values[:128],
                             grid=coarse.grid, geometry=coarse.geometry,
                             split="train", seed=coarse.seed)

base = run_baselines([coarse_test], [], ratios=("low",), snrs=(20.0,))
print("baseline test cp-t low snr20:", round(base.rows[0].nmse_db, 2), flush=True)
base_tr = run_baselines([train_eval], [], ratios=("low",), snrs=(20.0,))
print("baseline train128 cp-t:", round(base_tr.rows[0].nmse_db, 2), flush=True)

tcfg = Phase1Config(seed=7, epochs=100000, max_steps=max_steps)
steps_per_epoch = -(-corpus.total_samples // tcfg.batch_size)
print("steps/epoch:", steps_per_epoch, flush=True)
t0 = time.time()


def probe(tag):
    rep, _ = run_zero_shot(model, [train_eval], [], ratios=("low",),
                           snrs=(20.0,), with_confidence=False)
    te, _ = run_zero_shot(model, [coarse_test], [], ratios=("low",),
                          snrs=(20.0,), with_confidence=False)
    print(f"{tag}: train128 cp-t {rep.rows[0].nmse_db:.2f} dB | "
          f"test cp-t {te.rows[0].nmse_db:.2f} dB | {time.time()-t0:.0f}s",
          flush=True)


count = {"n": 0}


def log(msg):
    count["n"] += 1
    if count["n"] % 4 == 0:
        probe(f"epoch {count['n']} (~{count['n']*steps_per_epoch} steps)")
    else:
        print(msg, flush=True)


model, trace = run_phase1(model, corpus, tcfg, log=log)
probe(f"final({max_steps})")
torch.save({"state": model.state_dict()}, root / "pilot_model.pt")
print(f"phase1 total {time.time()-t0:.0f}s", flush=True)

# phase 2 pilot: confidence calibration + held-out MAE vs global-mean predictor
t1 = time.time()
p2 = Phase2Config(epochs=6, max_steps=600)
model = run_phase2(model, corpus, tcfg, p2, log=lambda m: print(m, flush=True))[0]
print(f"phase2 total {time.time()-t1:.0f}s", flush=True)

rep, _ = run_zero_shot(model, [coarse_test], [fine_test])
mae = confidence_mae(rep)
print("confidence MAE:", {k: round(v, 2) for k, v in mae.items()}, flush=True)
for task, pairs in sorted(rep.conf_pairs.items()):
    true = np.array([t for _, t in pairs])
    pred = np.array([p for p, _ in pairs])
    global_mae = float(np.mean(np.abs(true - true.mean())))
    print(f"  {task}: head MAE {np.mean(np.abs(pred - true)):.2f} vs "
          f"global-mean MAE {global_mae:.2f} | true range "
          f"[{true.min():.1f}, {true.max():.1f}]", flush=True)
all_true = np.array([t for pairs in rep.conf_pairs.values() for _, t in pairs])
all_pred = np.array([p for pairs in rep.conf_pairs.values() for p, _ in pairs])
print(f"overall: head {np.mean(np.abs(all_pred - all_true)):.2f} vs "
      f"global-mean {np.mean(np.abs(all_true - all_true.mean())):.2f}",
      flush=True)
print(f"grand total {time.time()-t0:.0f}s", flush=True)
