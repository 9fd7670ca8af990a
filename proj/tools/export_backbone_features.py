#!/usr/bin/env python3
"""Export pooled ImageNet-backbone features for every tile under a dataset root.

Output is the CSV consumed by `osteo train --embeddings`:

    tile_id,f0,f1,...

tile_id is the image file stem, matching the C++ ingest. Features are taken
after global pooling (fc / classifier replaced by identity), in eval mode.
"""

import argparse
import csv
import pathlib
import sys

import torch
import torchvision
from PIL import Image
from torchvision import transforms

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".tif", ".tiff", ".bmp"}

BACKBONES = {
    "inception_v3": (torchvision.models.inception_v3, "Inception_V3_Weights", 299),
    "vit": (torchvision.models.vit_b_16, "ViT_B_16_Weights", 224),
    "efficientnet_b0": (torchvision.models.efficientnet_b0, "EfficientNet_B0_Weights", 224),
}


def build(kind, weights_path):
    ctor, weights_enum, size = BACKBONES[kind]
    if weights_path:
        kwargs = {"aux_logits": True, "init_weights": False} if kind == "inception_v3" else {}
        net = ctor(weights=None, **kwargs)
        net.load_state_dict(torch.load(weights_path, map_location="cpu"))
    else:
        net = ctor(weights=getattr(torchvision.models, weights_enum).DEFAULT)
    if kind == "inception_v3":
        net.fc = torch.nn.Identity()
        net.aux_logits = False
        net.AuxLogits = None
    elif kind == "vit":
        net.heads = torch.nn.Identity()
    else:
        net.classifier = torch.nn.Identity()
    return net.eval(), size


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", required=True, type=pathlib.Path, help="dataset root (searched recursively)")
    ap.add_argument("--backbone", required=True, choices=sorted(BACKBONES))
    ap.add_argument("--out", required=True, type=pathlib.Path)
    ap.add_argument("--weights", help="local state_dict instead of downloading ImageNet weights")
    ap.add_argument("--batch-size", type=int, default=32)
    args = ap.parse_args()

    paths = sorted(p for p in args.data.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and not p.name.startswith("."))
    if not paths:
        sys.exit(f"no images under {args.data}")
    stems = [p.stem for p in paths]
    if len(set(stems)) != len(stems):
        sys.exit("duplicate tile ids (file stems) under the dataset root")

    torch.use_deterministic_algorithms(True)
    net, size = build(args.backbone, args.weights)
    prep = transforms.Compose([
        transforms.Resize((size, size), interpolation=transforms.InterpolationMode.BILINEAR),
        transforms.ToTensor(),
        transforms.Normalize(mean=[0.485, 0.456, 0.406], std=[0.229, 0.224, 0.225]),
    ])

    args.out.parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", newline="") as f, torch.no_grad():
        wr = csv.writer(f, lineterminator="\n")
        header_written = False
        for i in range(0, len(paths), args.batch_size):
            chunk = paths[i:i + args.batch_size]
            x = torch.stack([prep(Image.open(p).convert("RGB")) for p in chunk])
            feats = net(x).reshape(len(chunk), -1).double()
            if not header_written:
                wr.writerow(["tile_id"] + [f"f{k}" for k in range(feats.shape[1])])
                header_written = True
            for p, row in zip(chunk, feats.tolist()):
                wr.writerow([p.stem] + [repr(v) for v in row])
            print(f"{min(i + args.batch_size, len(paths))}/{len(paths)}", file=sys.stderr)


if __name__ == "__main__":
    main()
