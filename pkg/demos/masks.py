"""Look at IG, LRP and Mute masks for a few digits and save them as PGM images.

Writes ``demo_masks/<kind>_<i>.pgm`` (the input, its IG and LRP saliency and the
Mute mask) and prints how each mask lines up with the clean saliency.
Run with ``python demos/masks.py``.
"""
from pathlib import Path

import numpy as np

from xmask.benchmark import desk_classifier
from xmask.data import export_pgm
from xmask.explain import integrated_gradients, lrp_epsilon, normalize01
from xmask.monitor import cosine_similarity_batch, explain_score
from xmask.mute import MuteConfig, mute

out = Path("demo_masks")
out.mkdir(exist_ok=True)

desk = desk_classifier("mnist", seed=1, n_eval=200, epochs=10)
x = desk.test.images[:6]
ig = integrated_gradients(desk.model, x, steps=64)
lrp = lrp_epsilon(desk.model, x)
m = mute(lrp, ig, MuteConfig(seed=0))

# IG and LRP agree on where the evidence is, less on its sign and spread.
agree = cosine_similarity_batch(ig, lrp)
print("IG vs LRP cosine per sample:", np.round(agree, 3))
print("Mute IG weight a per sample:", np.round(m.info["a"], 3))
print("Mute alignment with clean IG:", np.round(explain_score(m.values, ig), 4))

for i in range(len(x)):
    export_pgm(x[i, 0], out / f"input_{i}.pgm")
    export_pgm(normalize01(ig)[i, 0], out / f"ig_{i}.pgm")
    export_pgm(normalize01(lrp)[i, 0], out / f"lrp_{i}.pgm")
    export_pgm(m.values[i, 0], out / f"mute_{i}.pgm")
print(f"wrote {4 * len(x)} images to {out}/")
