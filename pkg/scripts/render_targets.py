"""Render one synthetic sample with its training targets side by side.

Writes ``<out>/{image,dtgt,inverse,btgt,instances}.png`` where
``instances`` is the watershed of the ground-truth inverse map.
"""
import argparse
from pathlib import Path

from ddtseg.dataio import SynthConfig, normalize, synth_blobs, synth_touching_pair, write_image
from ddtseg.morphology import btgt, dtgt, inverse_normalize, segment_instances


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--touching", action="store_true", help="draw a single touching pair instead")
    p.add_argument("--h", type=float, default=0.1)
    p.add_argument("--out", default="runs/targets")
    args = p.parse_args()

    if args.touching:
        image, gt = synth_touching_pair(args.size, seed=args.seed, noise_sigma=0.03)
    else:
        image, gt = synth_blobs(SynthConfig(image_size=args.size, seed=args.seed))
    d = dtgt(gt)
    v = inverse_normalize(d, gt)
    out = Path(args.out)
    write_image(normalize(image), out / "image.png", "raw")
    write_image(d / max(d.max(), 1.0), out / "dtgt.png", "heatmap")
    write_image(v, out / "inverse.png", "heatmap")
    write_image(btgt(gt), out / "btgt.png", "class_colors")
    write_image(segment_instances(v, gt > 0, args.h), out / "instances.png", "instance_colors")
    print(f"wrote 5 images to {out}")


if __name__ == "__main__":
    main()
