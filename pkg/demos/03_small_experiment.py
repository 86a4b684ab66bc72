"""Prompt tuning on the default configuration, with half the epochs.

Takes about a minute on one core. Pretrains the frozen backbone, then compares the no-prompt head with the
synergistic prompts on a half-missing test split. Artefacts are cached under
``$SYP_CACHE_DIR`` (default ``~/.cache/synprompt``).
"""
import time

from synprompt.config import ExperimentConfig
from synprompt.experiment import prepare, run_cell

cfg = ExperimentConfig(epochs=10)
t0 = time.perf_counter()
art = prepare(cfg)
print(f"backbone ready in {time.perf_counter() - t0:.1f}s, checksum {art.backbone_checksum[:12]}")
for note in art.notes:
    print("  ", note)

# %%
for variant in ("no-prompt", "synergistic"):
    t0 = time.perf_counter()
    res = run_cell(cfg.replace(variant=variant), seed=11, art=art)
    curve = " ".join(f"{row['val_metric']:.2f}" for row in res.log)
    print(f"{variant:>12}: test accuracy {res.test_metric:.3f} "
          f"(best epoch {res.best_epoch}, {time.perf_counter() - t0:.0f}s)\n  val curve {curve}")
