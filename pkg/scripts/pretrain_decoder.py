#!/usr/bin/env python3
"""Stage 0: train the decoder alone on a separate synthetic corpus.

The result stands in for a pretrained text decoder and is the starting point
for stage 1. It is produced once and is not part of the timed experiment.

    python scripts/pretrain_decoder.py --config configs/toy.toml --output assets/toy_stage0.ckpt
"""

from __future__ import annotations

import argparse
import sys
import time

from streamst.config import load_config
from streamst.experiment import pretrain_decoder


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--segments", type=int, default=4000, help="simulated pretraining segments")
    args = p.parse_args(argv)
    cfg = load_config(args.config)
    start = time.perf_counter()

    def progress(rec):
        if rec["step"] % 100 == 0:
            print(f"step {rec['step']}: loss {rec['loss']:.4f} ({time.perf_counter() - start:.0f} s)", flush=True)

    pretrain_decoder(cfg, args.output, args.segments, on_step=progress)
    print(f"wrote {args.output} in {time.perf_counter() - start:.0f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
