"""Does looking across frames help?

The synthetic scenes contain two kinds of bright blob.  Persistent blobs
drift and grow over the whole sequence and are the positive class.  Flicker
blobs look the same but live for one frame and are labelled negative.  A
network that sees one frame at a time cannot separate them, so the identity
mix unit should plateau well below the attention-based DSTA unit.

    python demos/temporal_ablation.py [epochs] [kind ...]

Any of identity, conv3d, convlstm, tformer, dsta may be listed; the default
compares identity with dsta (about three minutes).
"""
import sys
from dataclasses import replace

from mcsdnet.experiments import AblationSetup, temporal_ablation


def main(argv: list[str]) -> None:
    setup = AblationSetup()
    if argv:
        setup = replace(setup, epochs=int(argv[0]))
    kinds = tuple(argv[1:]) or ("identity", "dsta")
    print(f"{setup.train_scenes} training and {setup.test_scenes} test scenes at "
          f"{setup.image_size}x{setup.image_size}, {setup.epochs} epochs per model")
    rows = temporal_ablation(kinds, setup, log=print)

    base = rows.get("identity")
    print()
    for kind, row in rows.items():
        c = row.counts
        delta = f"  {row.test_csi - base.test_csi:+.4f} vs identity" if base and kind != "identity" else ""
        print(f"{kind:>9}  test CSI {row.test_csi:.4f}  (tp {c.tp}, fp {c.fp}, fn {c.fn}){delta}")


if __name__ == "__main__":
    main(sys.argv[1:])
