"""Memorise eight synthetic sequences with the default network.

A model that cannot drive its training error to nearly zero on a handful of
samples has a bug somewhere in the forward or backward pass, so this is the
first thing to run after touching the layers.  With the default 200 epochs
it takes roughly twelve minutes on one core.

    python demos/overfit.py [epochs]
"""
import sys

from mcsdnet.evaluation import csi
from mcsdnet.experiments import overfit


def main(epochs: int = 200) -> None:
    def progress(rec, state):
        if rec.epoch % 10 == 0 or rec.epoch == 1:
            score = csi(rec.val_counts) or 0.0
            print(f"epoch {rec.epoch:4d}  loss {rec.train_loss:.5f}  train CSI {score:.4f}  lr {rec.lr:.1e}")

    result = overfit(epochs=epochs, on_epoch=progress)
    print(f"\nfinal training CSI {result.train_csi:.4f} after {result.epochs} epochs "
          f"({result.seconds / 60:.1f} min); loss {result.first_loss:.4g} -> {result.last_loss:.4g}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 200)
