"""Missing-modality patterns on the synthetic two-stream task."""
import numpy as np

from synprompt.config import ExperimentConfig
from synprompt.missing_data import apply_pattern, generate_pattern, synth_dataset

cfg = ExperimentConfig(n_train=200, n_val=50, n_test=50)
train, _, _ = synth_dataset(cfg, seed=0)
print("train split:", len(train), "samples,", train.image.shape[1], "image tokens,",
      train.text.shape[1], "text tokens,", train.labels.shape[1], "classes")

# %% Counts follow a floor rule; "both" splits the incomplete share evenly.
for kind in ("text", "image", "both"):
    for eta in (0.3, 0.5, 0.7):
        print(f"{kind:>5} eta={eta}: {generate_pattern(len(train), eta, kind, seed=1).counts()}")

# %% Masking keeps the stored tokens and only flips presence flags.
pattern = generate_pattern(len(train), 0.5, "both", seed=1)
masked = apply_pattern(train, pattern)
i = int(np.flatnonzero(pattern.cases == 1)[0])
s = masked.sample(i)
print("sample", s.id, "image present", s.image_present, "text present", s.text_present)
print("text ids still stored:", s.text[:6])
