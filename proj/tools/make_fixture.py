#!/usr/bin/env python3
"""Builds the tiny-CNN test fixture: a synthetic 10-class shapes set, a small
trained convolutional model exported as manifest + weight blob, and a pack of
ambiguous overlay images that the model misclassifies.

Usage: python3 tools/make_fixture.py --out tests/fixtures
"""
import argparse
import json
import pathlib
import struct

import numpy as np
import torch
import torch.nn as nn

SIZE = 24
CLASSES = [
    "disk", "ring", "square", "hollow-square", "triangle",
    "plus", "cross", "h-bars", "v-bars", "checker",
]


def render(cls, rng):
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float32)
    cy, cx = rng.uniform(8, 16, size=2)
    r = rng.uniform(5, 8)
    img = np.zeros((SIZE, SIZE), np.float32)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    ay, ax = np.abs(yy - cy), np.abs(xx - cx)
    if cls == 0:
        img[d <= r] = 1
    elif cls == 1:
        img[(d <= r) & (d >= r - 2.0)] = 1
    elif cls == 2:
        img[(ay <= r * 0.8) & (ax <= r * 0.8)] = 1
    elif cls == 3:
        s = r * 0.8
        img[(ay <= s) & (ax <= s) & ~((ay <= s - 2) & (ax <= s - 2))] = 1
    elif cls == 4:
        top, h = cy - r, 2 * r
        t = (yy - top) / h
        img[(t >= 0) & (t <= 1) & (ax <= t * r)] = 1
    elif cls == 5:
        img[((ay <= 1.2) & (ax <= r)) | ((ax <= 1.2) & (ay <= r))] = 1
    elif cls == 6:
        u, v = (yy - cy + xx - cx) / np.sqrt(2), (yy - cy - xx + cx) / np.sqrt(2)
        img[((np.abs(u) <= 1.2) & (np.abs(v) <= r)) | ((np.abs(v) <= 1.2) & (np.abs(u) <= r))] = 1
    elif cls == 7:
        period = rng.integers(3, 5)
        img[((yy.astype(int) % period) < 1.5) & (ay <= r) & (ax <= r)] = 1
    elif cls == 8:
        period = rng.integers(3, 5)
        img[((xx.astype(int) % period) < 1.5) & (ay <= r) & (ax <= r)] = 1
    elif cls == 9:
        cell = rng.integers(2, 4)
        chk = ((yy.astype(int) // cell + xx.astype(int) // cell) % 2) == 0
        img[chk & (ay <= r) & (ax <= r)] = 1
    img *= rng.uniform(0.6, 1.0)
    img += rng.normal(0, 0.08, size=img.shape).astype(np.float32)
    return np.clip(img, 0, 1).astype(np.float32)


def write_pack(path, images, labels, classes):
    n = len(images)
    with open(path, "wb") as f:
        f.write(b"GCDS")
        f.write(struct.pack("<6I", 1, n, 1, SIZE, SIZE, classes))
        f.write(np.asarray(images, dtype="<f4").tobytes())
        f.write(np.asarray(labels, dtype="<u2").tobytes())


class TinyCnn(nn.Module):
    def __init__(self):
        super().__init__()
        self.c1 = nn.Conv2d(1, 16, 3, padding=1, bias=False)
        self.b1 = nn.Parameter(torch.zeros(16))
        self.c2 = nn.Conv2d(16, 32, 3, padding=1, bias=False)
        self.b2 = nn.Parameter(torch.zeros(32))
        self.c3 = nn.Conv2d(32, 64, 3, padding=1, bias=False)
        self.b3 = nn.Parameter(torch.zeros(64))
        self.fc = nn.Linear(64, 10, bias=False)
        self.bf = nn.Parameter(torch.zeros(10))

    def forward(self, x):
        x = torch.relu(self.c1(x) + self.b1[None, :, None, None])
        x = nn.functional.max_pool2d(x, 2)
        x = torch.relu(self.c2(x) + self.b2[None, :, None, None])
        x = nn.functional.max_pool2d(x, 2)
        x = torch.relu(self.c3(x) + self.b3[None, :, None, None])
        x = x.mean(dim=(2, 3))
        return self.fc(x) + self.bf


def export(model, out, blob_name):
    blobs, layers, offset = [], [], 0

    def add(arr):
        nonlocal offset
        a = arr.detach().numpy().astype("<f4").ravel()
        blobs.append(a)
        start = offset
        offset += a.size
        return start, int(a.size)

    def conv(name, w, b, probe):
        o, n = add(w)
        layers.append({"name": name, "kind": "conv2d", "shape": list(w.shape),
                       "stride": 1, "padding": 1, "weight_offset": o, "weight_len": n, "is_probe": False})
        o, n = add(b)
        layers.append({"name": name + ".bias", "kind": "bias-add", "shape": [int(b.shape[0])],
                       "weight_offset": o, "weight_len": n, "is_probe": False})
        layers.append({"name": name + ".relu", "kind": "relu", "is_probe": probe})

    conv("block1", model.c1.weight, model.b1, True)
    layers.append({"name": "pool1", "kind": "maxpool2d", "kernel": 2, "stride": 2, "is_probe": False})
    conv("block2", model.c2.weight, model.b2, True)
    layers.append({"name": "pool2", "kind": "maxpool2d", "kernel": 2, "stride": 2, "is_probe": False})
    conv("block3", model.c3.weight, model.b3, True)
    layers.append({"name": "gap", "kind": "avgpool2d", "is_probe": False})
    layers.append({"name": "flatten", "kind": "flatten", "is_probe": False})
    o, n = add(model.fc.weight)
    layers.append({"name": "head", "kind": "dense", "shape": list(model.fc.weight.shape),
                   "weight_offset": o, "weight_len": n, "is_probe": False})
    o, n = add(model.bf)
    layers.append({"name": "head.bias", "kind": "bias-add", "shape": [10],
                   "weight_offset": o, "weight_len": n, "is_probe": False})
    manifest = {"format": "circuits-model", "version": 1, "blob": blob_name,
                "input_shape": [1, SIZE, SIZE], "class_count": 10, "layers": layers}
    (out / "tiny_cnn.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out / blob_name).write_bytes(np.concatenate(blobs).tobytes())
    return offset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="tests/fixtures")
    ap.add_argument("--count", type=int, default=2000)
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(20240917)
    torch.manual_seed(7)
    labels = np.arange(args.count) % 10
    rng.shuffle(labels)
    images = np.stack([render(int(c), rng) for c in labels])[:, None]

    model = TinyCnn()
    x = torch.from_numpy(images)
    y = torch.from_numpy(labels.astype(np.int64))
    opt = torch.optim.Adam(model.parameters(), lr=3e-3)
    for epoch in range(40):
        perm = torch.randperm(len(x))
        for i in range(0, len(x), 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(model(x[idx]), y[idx])
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc = (model(x).argmax(1) == y).float().mean().item()
        print(f"epoch {epoch} loss {loss.item():.4f} train acc {acc:.4f}")
    model.eval()

    params = export(model, out, "tiny_cnn.bin")
    write_pack(out / "shapes.pack", images[:, 0], labels, 10)

    # Overlay pairs of shapes; keep the ones confidently assigned to the wrong class.
    audit_imgs, audit_labels = [], []
    arng = np.random.default_rng(99)
    while len(audit_imgs) < 12:
        a, b = arng.choice(10, size=2, replace=False)
        img = np.clip(0.55 * render(int(a), arng) + render(int(b), arng), 0, 1)[None]
        with torch.no_grad():
            logits = model(torch.from_numpy(img[None]))[0]
        top2 = torch.topk(logits, 2).values
        if logits.argmax().item() != a and (top2[0] - top2[1]).item() > 0.5:
            audit_imgs.append(img[0])
            audit_labels.append(int(a))
    write_pack(out / "audit.pack", np.stack(audit_imgs), audit_labels, 10)

    with torch.no_grad():
        ref = model(x[:8]).numpy().tolist()
        acc = (model(x).argmax(1) == y).float().mean().item()
    meta = {"classes": CLASSES, "params": params, "train_accuracy": acc, "reference_logits": ref}
    (out / "fixture_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(f"params {params}, train accuracy {acc:.4f}, audit samples {len(audit_imgs)}")


if __name__ == "__main__":
    main()
