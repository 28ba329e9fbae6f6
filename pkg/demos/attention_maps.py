#!/usr/bin/env python3
"""Export per-class attention maps for a trained model as PGM images.

Trains briefly on the synthetic task, picks one test sample per class,
and writes two small grayscale images for each: the semantic map column
(where the patch grid carries evidence for that class) and the
alignment attention column. Brighter pixels mean more weight. Any PGM
viewer opens them; they are also plain enough to read with a hex dump.

Run: python3 demos/attention_maps.py --out /tmp/sarl-maps
"""

import argparse
import os

from sarl.data import generate
from sarl.training import (TrainConfig, export_attention, synthetic_config,
                           train)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="/tmp/sarl-maps")
    ap.add_argument("--epochs", type=int, default=15)
    args = ap.parse_args()

    cfg = TrainConfig(epochs=args.epochs)
    train_ds, test_ds = generate(synthetic_config(cfg))
    res = train(cfg, train_ds, test_ds)
    print(f"trained to test mAP {res.report.mean_ap:.4f}")

    os.makedirs(args.out, exist_ok=True)
    written = 0
    for class_id in range(cfg.num_classes):
        hits = [i for i in range(len(test_ds))
                if test_ds.labels[i, class_id]]
        if not hits:
            continue
        sample = test_ds.payload[hits[0]]
        map_path = os.path.join(args.out, f"class{class_id}_map.pgm")
        attn_path = os.path.join(args.out, f"class{class_id}_attn.pgm")
        export_attention(res.model, sample, class_id, map_path, attn_path)
        written += 2
    print(f"wrote {written} PGM files to {args.out}")


if __name__ == "__main__":
    main()
