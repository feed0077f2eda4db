"""Compare the four attacks on the desk digits set, X-UNet included.

Trains the MLP classifier, fits an X-UNet on 200 training images, then runs
the benchmark over 300 evaluation images and prints the report table.
Run with ``python demos/stealth_gap.py``. Takes a minute or two.
"""
from xmask.benchmark import BenchmarkConfig, desk_classifier, run_benchmark
from xmask.nn import build_xunet
from xmask.train import TrainConfig, train_xunet

desk = desk_classifier("mnist", seed=1, n_eval=300)
print(f"classifier clean accuracy: {desk.clean_accuracy:.3f}")

xunet = build_xunet(seed=1)
rows = train_xunet(xunet, desk.model, desk.train.subset(slice(0, 200)),
                   TrainConfig(epochs=6, batch_size=50, lr=0.01, seed=1))
for r in rows:
    print(f"xunet epoch {r['epoch']}: total {r['total']:.4f} "
          f"(stealth {r['term1']:.4f}, mask {r['term2']:.4f}, accuracy {r['term3']:.4f})")

# Query timing keeps the table reproducible; use timing="wall" for seconds.
report = run_benchmark(desk.model, desk.test.images, desk.test.labels,
                       BenchmarkConfig(timing="queries", seed=1), xunet=xunet)
print()
print(report.to_text())
