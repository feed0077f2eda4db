"""Train a small classifier on synthetic bars, attack it, and ask the monitor.

Run with ``python demos/quickstart.py``. Takes well under a minute.
"""
import numpy as np

from xmask.attacks import AttackConfig, masked_pgd, pgd
from xmask.data import synthetic_dataset
from xmask.explain import integrated_gradients, lrp_epsilon
from xmask.monitor import MonitorConfig, calibrate_threshold, monitor_verdict, stealth_scores
from xmask.mute import MuteConfig, mute
from xmask.nn import build_mlp
from xmask.train import TrainConfig, accuracy, train_classifier

SHAPE = (1, 16, 16)

ds = synthetic_dataset("bars", 600, SHAPE, classes=4, seed=0)
train, test = ds.split_at(500)
model = build_mlp(SHAPE, hidden=(64,), classes=4, seed=0)
train_classifier(model, train, TrainConfig(epochs=8, batch_size=50, lr=0.05))
model.requires_grad_(False)
x, y = test.images, test.labels
print(f"clean accuracy: {accuracy(model, x, y):.3f}")

# The monitor compares IG maps; tau comes from how much IG moves under 1/255 noise.
mon = MonitorConfig(ig_steps=32)
tau = calibrate_threshold(model, x, cfg=mon)
print(f"calibrated tau: {tau:.4f}")
# On clean synthetic data tau sits very close to 1, so almost any attack trips the
# monitor. Stealth (the mean similarity) is the finer signal.

# Mute: per-sample random convex mix of normalised LRP and IG, used as a gate.
ig = integrated_gradients(model, x, steps=32)
lrp = lrp_epsilon(model, x)
mask = mute(lrp, ig, MuteConfig(seed=0)).values

atk = AttackConfig(epsilon=0.2, alpha=0.02, steps=10)
for name, adv in (("pgd", pgd(model, x, y, atk)), ("masked-pgd", masked_pgd(model, x, y, mask, atk))):
    stealth = stealth_scores(model, x, adv.x_adv, mon, clean_explanation=ig)
    verdict = monitor_verdict(model, x, adv.x_adv, MonitorConfig(ig_steps=32, tau=tau, calibration="fixed"))
    print(f"{name:11s} accuracy {adv.accuracy:.3f}  stealth {np.mean(stealth):.3f}  "
          f"monitor pass rate {verdict.pass_rate:.3f}")
