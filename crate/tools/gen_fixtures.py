#!/usr/bin/env python3
"""Trains the two small fixture networks and writes them in the toolkit's
on-disk format (model.json + .qtn tensors) together with calibration and
held-out sets.

    python3 tools/gen_fixtures.py fixtures/

Deterministic for a given torch version; the generated files are checked in,
so this only needs to run when the fixtures change.
"""

import argparse
import json
import struct
from pathlib import Path

import numpy as np
import torch
from torch import nn

MAGIC = b"QTNS"
VERSION = 1

CALIB = 512
TEST = 2000
TRAIN = 20000
PROBES = 16


def write_qtn(path, array):
    a = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", VERSION, a.ndim))
        f.write(struct.pack("<%dI" % a.ndim, *a.shape))
        f.write(a.tobytes())


class Mlp(nn.Module):
    def __init__(self):
        super().__init__()
        self.fc = nn.ModuleList([nn.Linear(16, 32), nn.Linear(32, 32), nn.Linear(32, 32), nn.Linear(32, 4)])

    def forward(self, x):
        for fc in self.fc[:-1]:
            x = torch.relu(fc(x))
        return self.fc[-1](x)

    def manifest(self):
        layers = []
        for i, fc in enumerate(self.fc):
            layers.append(("dense", fc, {}))
            if i + 1 < len(self.fc):
                layers.append(("relu", None, {}))
        return layers


class Cnn(nn.Module):
    """conv-relu, strided conv-relu, a residual block, conv-relu, pool, dense."""

    def __init__(self, ch=4):
        super().__init__()
        self.c1 = nn.Conv2d(1, ch, 3, padding=1)
        self.c2 = nn.Conv2d(ch, ch, 2, stride=2)
        self.c3 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c4 = nn.Conv2d(ch, ch, 3, padding=1)
        self.c5 = nn.Conv2d(ch, ch, 3, padding=1)
        self.fc = nn.Linear(ch * 2 * 2, 4)

    def forward(self, x):
        x = torch.relu(self.c1(x))
        skip = torch.relu(self.c2(x))
        x = torch.relu(self.c3(skip))
        x = torch.relu(self.c4(x) + skip)
        x = torch.relu(self.c5(x))
        x = nn.functional.avg_pool2d(x, 2)
        return self.fc(x.flatten(1))

    def manifest(self):
        return [
            ("conv2d", self.c1, {"stride": 1, "pad": 1}),
            ("relu", None, {}),
            ("conv2d", self.c2, {"stride": 2, "pad": 0}),
            ("relu", None, {}),
            ("conv2d", self.c3, {"stride": 1, "pad": 1}),
            ("relu", None, {}),
            ("conv2d", self.c4, {"stride": 1, "pad": 1}),
            ("residual-add", None, {"residual_from": 3}),
            ("relu", None, {}),
            ("conv2d", self.c5, {"stride": 1, "pad": 1}),
            ("relu", None, {}),
            ("avgpool", None, {"pool": 2}),
            ("flatten", None, {}),
            ("dense", self.fc, {}),
        ]


def mlp_data(gen, n):
    # labels from a fixed random teacher, with some label noise
    teacher = torch.Generator().manual_seed(1234)
    w1 = torch.randn(16, 48, generator=teacher)
    w2 = torch.randn(48, 4, generator=teacher)
    x = torch.randn(n, 16, generator=gen)
    logits = torch.tanh(x @ w1 / 4.0) @ w2
    y = logits.argmax(1)
    flip = torch.rand(n, generator=gen) < 0.05
    y[flip] = torch.randint(0, 4, (int(flip.sum()),), generator=gen)
    return x, y


def cnn_data(gen, n):
    # four smooth prototype images, randomly shifted, scaled and noised
    protos_gen = torch.Generator().manual_seed(4321)
    base = torch.randn(4, 1, 4, 4, generator=protos_gen)
    protos = nn.functional.interpolate(base, size=(8, 8), mode="bilinear", align_corners=False)
    y = torch.randint(0, 4, (n,), generator=gen)
    x = protos[y].clone()
    shifts = torch.randint(-1, 2, (n, 2), generator=gen)
    for i in range(n):
        x[i] = torch.roll(x[i], shifts=(int(shifts[i, 0]), int(shifts[i, 1])), dims=(1, 2))
    x = x * (0.6 + 0.8 * torch.rand(n, 1, 1, 1, generator=gen))
    x = x + 0.9 * torch.randn(x.shape, generator=gen)
    return x, y


def train(model, x, y, epochs, seed):
    torch.manual_seed(seed)
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, epochs)
    loss_fn = nn.CrossEntropyLoss()
    n = x.shape[0]
    for _ in range(epochs):
        perm = torch.randperm(n)
        for s in range(0, n, 128):
            idx = perm[s : s + 128]
            opt.zero_grad()
            loss_fn(model(x[idx]), y[idx]).backward()
            opt.step()
        sched.step()


def export(model, name, out):
    out.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, (kind, mod, extra) in enumerate(model.manifest()):
        spec = {"kind": kind, **extra}
        if mod is not None:
            write_qtn(out / f"layer{i}_w.qtn", mod.weight.detach().numpy())
            write_qtn(out / f"layer{i}_b.qtn", mod.bias.detach().numpy())
            spec["weight_file"] = f"layer{i}_w.qtn"
            spec["bias_file"] = f"layer{i}_b.qtn"
        layers.append(spec)
    manifest = {"name": name, "layers": layers, "num_classes": 4}
    (out / "model.json").write_text(json.dumps(manifest, indent=2) + "\n")


def accuracy(model, x, y):
    with torch.no_grad():
        return float((model(x).argmax(1) == y).double().mean())


def build(name, model, data_fn, epochs, seed, root):
    gen = torch.Generator().manual_seed(seed)
    x_tr, y_tr = data_fn(gen, TRAIN)
    x_ca, y_ca = data_fn(gen, CALIB)
    x_te, y_te = data_fn(gen, TEST)
    train(model, x_tr, y_tr, epochs, seed)
    model.eval()
    out = root / name
    export(model, name, out)
    write_qtn(out / "calib_x.qtn", x_ca.numpy())
    write_qtn(out / "calib_y.qtn", y_ca.numpy().astype(np.float32))
    write_qtn(out / "test_x.qtn", x_te.numpy())
    write_qtn(out / "test_y.qtn", y_te.numpy().astype(np.float32))
    with torch.no_grad():
        probe = x_te[:PROBES].double()
        logits = model.double()(probe)
    model.float()
    write_qtn(out / "probe_x.qtn", probe.numpy())
    write_qtn(out / "probe_logits.qtn", logits.numpy())
    stats = {
        "train_accuracy": accuracy(model, x_tr, y_tr),
        "calib_accuracy": accuracy(model, x_ca, y_ca),
        "test_accuracy": accuracy(model, x_te, y_te),
    }
    (out / "reference.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(name, stats)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    torch.set_num_threads(1)
    build("mlp", Mlp(), mlp_data, 30, 7, args.out)
    build("cnn", Cnn(), cnn_data, 30, 11, args.out)


if __name__ == "__main__":
    main()
