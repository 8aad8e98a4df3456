"""Train the full model on a synthetic fake-news set and print test metrics.

    python scripts/run_synthetic.py --delta 10 --rho 0.9 --epochs 200 --stop-at 0.95
"""

import argparse
import json

from racmc.encoders import RecordArrays, SynthConfig, stratified_split, synth_generate
from racmc.model import ModelConfig
from racmc.trainer import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--real", type=int, default=250)
    p.add_argument("--fake", type=int, default=250)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--delta", type=float, default=10.0)
    p.add_argument("--rho", type=float, default=0.9)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--stop-at", type=float, default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()

    synth = SynthConfig(n_real=args.real, n_fake=args.fake, delta=args.delta, rho=args.rho,
                        noise=args.noise, seed=11)
    train_recs, test_recs = stratified_split(synth_generate(synth), args.test_per_class, args.test_per_class)
    train_recs, test_recs = RecordArrays.from_records(train_recs), RecordArrays.from_records(test_recs)
    model = ModelConfig(n1=synth.n1, n2=synth.n2, n_raw=synth.n_raw, dim=args.dim, heads=args.heads)
    for seed in args.seeds:
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=seed, model=model,
                          stop_at_accuracy=args.stop_at)
        result = train(train_recs, test_recs, cfg)
        print(json.dumps({"seed": seed, "best_epoch": result.best_epoch,
                          "accuracy": result.best_accuracy,
                          "test": result.history[result.best_epoch - 1]["test"]}))


if __name__ == "__main__":
    main()
