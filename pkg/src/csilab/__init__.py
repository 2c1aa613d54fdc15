"""Desk-scale masked denoising autoencoder for CSI reconstruction."""

__version__ = "0.1.0"

from .channel import (ArrayGeometry, CsiSample, GridSpec, PathParams,
                      ScenarioPreset, add_awgn, build_corpus, sample_scenario,
                      steering_vector, synth_channel)
from .errors import (ConfigError, CorruptionError, CsilabError,
                     DivergenceError, FormatError)
from .model import (MdaeModel, ModelConfig, build_model, load_model,
                    reconstruct, save_model, stf_positional_encoding)
from .numeric import (GradCheckReport, SeededRng, child_seed,
                      finite_diff_gradient, topk_softmax)
from .pipeline import (MaskPlan, PatchSpec, PilotPattern, TokenGrid,
                       complex_to_planes, make_mask_plan, normalize, patchify,
                       pilot_downsample_interpolate, planes_to_complex,
                       unpatchify)
from .storage import (Dataset, RunConfig, load_checkpoint, load_config,
                      parse_config, read_dataset, save_checkpoint,
                      write_dataset)
from .training import (AdamW, Corpus, Phase1Config, Phase2Config, draw_task,
                       load_balance_loss, lr_schedule, reconstruction_loss,
                       run_phase1, run_phase2)
from .evaluate import (EvalReport, FinetuneConfig, baseline_interpolate_ce,
                       baseline_linear_extrapolate, confidence_mae,
                       finetune_scenario_classifier, nmse, run_baselines,
                       run_zero_shot, spectral_efficiency)
