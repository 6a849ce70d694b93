#!/usr/bin/env python3
"""Convert torchvision ResNet-18 weights into the auranet tensor archive.

    python scripts/export_resnet18.py                      # ImageNet weights via torchvision
    python scripts/export_resnet18.py --state-dict r18.pth # a local state_dict
    python scripts/export_resnet18.py --random --seed 0    # torchvision init, for testing

The classifier (fc.*) and num_batches_tracked buffers are dropped. The
default output is $AURANET_WEIGHTS_DIR/resnet18_imagenet.aura (or
~/.cache/auranet/...), which is where auranet looks when no weights path or
url is configured. The file's SHA-256 is printed for the `weights.sha256`
config key.
"""

import argparse
import hashlib
import json
import os
import struct
import sys
from pathlib import Path

MAGIC = b"AURAARC1"
VERSION = 1
DTYPE_F32 = 4


def default_output():
    root = os.environ.get("AURANET_WEIGHTS_DIR")
    base = Path(root) if root else Path.home() / ".cache" / "auranet"
    return base / "resnet18_imagenet.aura"


def load_state_dict(args):
    import torch
    import torchvision

    if args.state_dict:
        return torch.load(args.state_dict, map_location="cpu"), str(args.state_dict)
    if args.random:
        torch.manual_seed(args.seed)
        model = torchvision.models.resnet18(weights=None)
        if args.random_bn_stats:
            # Non-trivial running statistics so inference-mode batch norm is exercised.
            for m in model.modules():
                if isinstance(m, torch.nn.BatchNorm2d):
                    m.running_mean.uniform_(-0.5, 0.5)
                    m.running_var.uniform_(0.5, 1.5)
                    m.weight.data.uniform_(0.5, 1.5)
                    m.bias.data.uniform_(-0.2, 0.2)
        return model.state_dict(), f"torchvision init, seed {args.seed}"
    weights = torchvision.models.ResNet18_Weights.IMAGENET1K_V1
    model = torchvision.models.resnet18(weights=weights)
    return model.state_dict(), f"torchvision {weights}"


def encode(state, source):
    tensors = {
        k: v.detach().to("cpu").float().contiguous()
        for k, v in state.items()
        if not k.startswith("fc.") and not k.endswith("num_batches_tracked")
    }
    meta = json.dumps({"kind": "resnet18_encoder", "source": source}).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<IB", VERSION, DTYPE_F32)
    out += struct.pack("<Q", len(meta)) + meta
    out += struct.pack("<Q", len(tensors))
    # Names sorted bytewise, matching the reader's ordered map.
    for name in sorted(tensors, key=lambda s: s.encode()):
        t = tensors[name]
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", t.dim())
        out += b"".join(struct.pack("<Q", d) for d in t.shape)
        out += t.numpy().astype("<f4").tobytes()
    out += hashlib.sha256(out).digest()
    return bytes(out), len(tensors)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--output", type=Path, default=None)
    p.add_argument("--state-dict", type=Path)
    p.add_argument("--random", action="store_true", help="use torchvision's random init instead of ImageNet weights")
    p.add_argument("--random-bn-stats", action="store_true", help="with --random, also randomize batch-norm statistics")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    state, source = load_state_dict(args)
    data, count = encode(state, source)
    out = args.output or default_output()
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(".partial")
    tmp.write_bytes(data)
    tmp.replace(out)
    print(f"wrote {count} tensors to {out}", file=sys.stderr)
    print(hashlib.sha256(data).hexdigest())


if __name__ == "__main__":
    main()
