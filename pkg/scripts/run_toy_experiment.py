#!/usr/bin/env python3
"""Timed toy experiment: synthesize, train stages 1 and 2, stream at each k, evaluate.

    python scripts/run_toy_experiment.py --config configs/toy.toml \
        --stage0 assets/toy_stage0.ckpt --work runs/toy
"""

from __future__ import annotations

import argparse
import json
import sys

from streamst.experiment import run_toy_experiment


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/toy.toml")
    p.add_argument("--stage0", default="assets/toy_stage0.ckpt", help="checkpoint from pretrain_decoder.py")
    p.add_argument("--work", default="runs/toy")
    args = p.parse_args(argv)
    rep = run_toy_experiment(args.config, args.work, args.stage0)
    for k in rep.multipliers:
        r = rep.reports[k]
        print(f"k={k}: token accuracy {100 * rep.accuracy[k]:.2f}%  BLEU {r['bleu']:.2f}  "
              f"StreamLAAL {r['stream_laal_ms']:.0f} ms  StreamLAAL_CA {r['stream_laal_ca_ms']:.0f} ms")
    print(f"pooled token accuracy {100 * rep.pooled_accuracy:.2f}%, StreamLAAL monotone: {rep.laal_monotone}")
    print(f"total {rep.seconds:.0f} s; stages {json.dumps(rep.stage_seconds)}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
