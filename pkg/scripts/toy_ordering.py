"""Train UNet1 and DDT_UNet2 on seeded synthetic splits and compare test scores.

    python scripts/toy_ordering.py --seeds 0 1 2 3 4 --out runs/ordering.json
"""
import argparse
import json
from dataclasses import replace

from ddtseg.dataio import write_json
from ddtseg.experiment import OrderingConfig, ordering_run, ordering_verdict


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--epochs", type=int, default=OrderingConfig.epochs)
    p.add_argument("--image-size", type=int, default=OrderingConfig.image_size)
    p.add_argument("--out", default="runs/ordering.json")
    args = p.parse_args()

    cfg = replace(OrderingConfig(), epochs=args.epochs, image_size=args.image_size)
    runs = []
    for seed in args.seeds:
        r = ordering_run(cfg, seed)
        runs.append(r)
        a, b = r["UNet1"], r["DDT_UNet2"]
        print(f"seed {seed}: WDMC {a['wdmc']:.3f} vs {b['wdmc']:.3f}  "
              f"border Dice {a['border_dice']:.3f} vs {b['border_dice']:.3f}  ({r['seconds']:.0f}s)")
    ok, wins = ordering_verdict(runs)
    print(f"DDT_UNet2 ahead in {wins}/{len(runs)} seeds")
    write_json(args.out, {"config": cfg.to_json(), "runs": runs, "wins": wins, "holds": ok})


if __name__ == "__main__":
    main()
