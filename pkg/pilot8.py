"""Phase-2 pilot only: reuse the phase-1 backbone, recalibrate confidence."""
import sys
import time
from pathlib import Path

import numpy as np
import torch

torch.set_num_threads(1)

from csilab import storage
from csilab.model import ModelConfig, build_model
from csilab.training import Corpus, Phase1Config, Phase2Config, run_phase2
from csilab.evaluate import confidence_mae, run_zero_shot

root = Path(sys.argv[1] if len(sys.argv) > 1 else "/root/pilot7b")
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 40

coarse = storage.read_dataset(root / "indoor-los_coarse_train.csids")
fine = storage.read_dataset(root / "indoor-los_fine_train.csids")
coarse_test = storage.read_dataset(root / "indoor-los_coarse_test.csids")
fine_test = storage.read_dataset(root / "indoor-los_fine_test.csids")
corpus = Corpus(coarse=[coarse], fine=[fine])

cfg = ModelConfig(hidden_dim=64, enc_depth=4, dec_depth=2, heads=4,
                  experts_total=8, experts_active=2, expert_dim=128)
model = build_model(cfg, seed=7)
saved = torch.load(root / "pilot_model.pt", weights_only=True)["state"]
backbone = {k: v for k, v in saved.items() if not k.startswith("conf_")}
missing = model.load_state_dict(backbone, strict=False)
print("kept fresh:", missing.missing_keys[:3], "...", flush=True)

tcfg = Phase1Config(seed=7, mask_ratio=(0.25, 0.50),
                    pilot_freq=(1.0 / 24.0, 1.0 / 12.0), snr=(10.0, 20.0))
t0 = time.time()
p2 = Phase2Config(epochs=epochs, tasks=(2, 3, 4))
model = run_phase2(model, corpus, tcfg, p2,
                   log=lambda m: print(m, flush=True))[0]
print(f"phase2 total {time.time()-t0:.0f}s", flush=True)

rep, _ = run_zero_shot(model, [coarse_test], [fine_test])
mae = confidence_mae(rep)
print("confidence MAE:", {k: round(v, 2) for k, v in mae.items()}, flush=True)
for task, pairs in sorted(rep.conf_pairs.items()):
    true = np.array([t for _, t in pairs])
    pred = np.array([p for p, _ in pairs])
    print(f"  {task}: head MAE {np.mean(np.abs(pred - true)):.2f} | "
          f"pred range [{pred.min():.1f}, {pred.max():.1f}] | true range "
          f"[{true.min():.1f}, {true.max():.1f}]", flush=True)
all_true = np.array([t for pairs in rep.conf_pairs.values() for _, t in pairs])
all_pred = np.array([p for pairs in rep.conf_pairs.values() for p, _ in pairs])
global_mae = float(np.mean(np.abs(all_true - all_true.mean())))
print(f"overall: head {np.mean(np.abs(all_pred - all_true)):.2f} vs "
      f"single-global-mean {global_mae:.2f}", flush=True)
