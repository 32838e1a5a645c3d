"""Trains the small digit CNN used by `fecim infer` and writes the fixtures.

    python scripts/train_digits.py crates/core/fixtures

Outputs digits_cnn.tensors (float weights + activation ranges) and
digits_test.images (held-out 8x8 images). Formats are described in
crates/core/src/nn_eval.rs.
"""

import sys
from pathlib import Path

import numpy as np
import torch
from sklearn.datasets import load_digits
from torch import nn

SEED = 7
N_TEST = 500


class Net(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 8, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1, bias=False)
        self.drop = nn.Dropout(0.2)
        self.fc = nn.Linear(64, 10, bias=False)

    def forward(self, x, taps=None):
        a1 = torch.relu(self.conv1(x))
        h = nn.functional.max_pool2d(a1, 2)
        a2 = torch.relu(self.conv2(h))
        h = nn.functional.max_pool2d(a2, 2)
        if taps is not None:
            taps.extend([a1, a2])
        return self.fc(self.drop(h.flatten(1)))


def main(out_dir):
    torch.manual_seed(SEED)
    rng = np.random.default_rng(SEED)
    digits = load_digits()
    images = digits.images.astype(np.int64)
    labels = digits.target.astype(np.int64)
    order = rng.permutation(len(labels))
    test, train = order[:N_TEST], order[N_TEST:]

    # Inputs are seen by the network on the same 0..15 grid the simulator uses.
    def prep(idx):
        q = np.rint(images[idx] * 15 / 16) / 15
        return torch.tensor(q, dtype=torch.float32).unsqueeze(1)

    x_train, y_train = prep(train), torch.tensor(labels[train])
    x_test, y_test = prep(test), torch.tensor(labels[test])

    net = Net()
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    for epoch in range(80):
        net.train()
        perm = torch.randperm(len(y_train))
        for i in range(0, len(perm), 64):
            b = perm[i : i + 64]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(net(x_train[b]), y_train[b])
            loss.backward()
            opt.step()
    net.eval()
    with torch.no_grad():
        taps = []
        net(x_train, taps)
        acc = (net(x_test).argmax(1) == y_test).float().mean().item()
    ranges = [float(torch.quantile(t.flatten(), 0.999)) for t in taps]
    print(f"float test accuracy {acc:.4f}, activation ranges {ranges}")

    out = Path(out_dir)
    with open(out / "digits_cnn.tensors", "w") as f:
        f.write("fecim-tensors 1\n")
        for name, t in [
            ("conv1", net.conv1.weight),
            ("conv2", net.conv2.weight),
            ("fc", net.fc.weight),
        ]:
            a = t.detach().numpy().astype(np.float64)
            f.write(name + " " + " ".join(str(d) for d in a.shape) + "\n")
            f.write(" ".join(repr(float(v)) for v in a.flatten()) + "\n")
        for name, r in zip(["conv1.act", "conv2.act"], ranges):
            f.write(f"{name} 1\n{r!r}\n")
    with open(out / "digits_test.images", "w") as f:
        f.write(f"fecim-images 1\n{N_TEST} 8 8 16\n")
        for i in test:
            f.write(str(labels[i]) + " " + " ".join(str(v) for v in images[i].flatten()) + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/fixtures")
