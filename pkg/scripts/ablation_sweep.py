"""Train the full model and every single-flag variant on one synthetic set.

    python scripts/ablation_sweep.py --delta 1 --rho 0.5 --epochs 10

Prints one row per variant: best test accuracy, its epoch, and the fake/real F1.
"""

import argparse

from racmc.encoders import RecordArrays, SynthConfig, stratified_split, synth_generate
from racmc.model import ABLATIONS, Ablation, ModelConfig
from racmc.trainer import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--per-class", type=int, default=250)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    synth = SynthConfig(n_real=args.per_class, n_fake=args.per_class, delta=args.delta, rho=args.rho,
                        noise=args.noise, seed=args.seed)
    train_recs, test_recs = stratified_split(synth_generate(synth), args.test_per_class, args.test_per_class)
    train_set, test_set = RecordArrays.from_records(train_recs), RecordArrays.from_records(test_recs)
    model = ModelConfig(n1=synth.n1, n2=synth.n2, n_raw=synth.n_raw, dim=args.dim, heads=args.heads)

    print(f"{'variant':<12} {'acc':>6} {'epoch':>5} {'F1 fake':>8} {'F1 real':>8}")
    for name in ("full", *ABLATIONS):
        ablation = Ablation() if name == "full" else Ablation.from_names([name])
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed, model=model,
                          ablation=ablation)
        result = train(train_set, test_set, cfg)
        test = result.history[result.best_epoch - 1]["test"]
        print(f"{name:<12} {result.best_accuracy:>6.3f} {result.best_epoch:>5d} "
              f"{test['fake']['f1']:>8.3f} {test['real']['f1']:>8.3f}")


if __name__ == "__main__":
    main()
