#!/usr/bin/env python3
"""Brute-force metric oracle.

Draws random confusion matrices, expands each into its list of
(truth, prediction) samples and evaluates every metric directly from the
samples. Writes one line per matrix:

    C;count,count,...;rk;cohen;qwk;specificity;balanced_accuracy
"""
import math
import random
import sys


def samples(c, counts):
    out = []
    for t in range(c):
        for p in range(c):
            out += [(t, p)] * counts[t * c + p]
    return out


def rk(c, s):
    n = len(s)
    x = [[1.0 if t == k else 0.0 for k in range(c)] for t, _ in s]
    y = [[1.0 if p == k else 0.0 for k in range(c)] for _, p in s]
    mx = [sum(r[k] for r in x) / n for k in range(c)]
    my = [sum(r[k] for r in y) / n for k in range(c)]

    def cov(a, ma, b, mb):
        return sum((a[i][k] - ma[k]) * (b[i][k] - mb[k]) for i in range(n) for k in range(c))

    return cov(x, mx, y, my) / math.sqrt(cov(x, mx, x, mx) * cov(y, my, y, my))


def kappa(c, s, weight):
    n = len(s)
    truth = [sum(1 for t, _ in s if t == k) / n for k in range(c)]
    pred = [sum(1 for _, p in s if p == k) / n for k in range(c)]
    observed = sum(weight(t, p) for t, p in s) / n
    expected = sum(weight(i, j) * truth[i] * pred[j] for i in range(c) for j in range(c))
    return 1.0 - observed / expected


def specificity(c, s):
    vals = []
    for k in range(c):
        tn = sum(1 for t, p in s if t != k and p != k)
        fp = sum(1 for t, p in s if t != k and p == k)
        if tn + fp > 0:
            vals.append(tn / (tn + fp))
    return sum(vals) / len(vals)


def balanced_accuracy(c, s):
    vals = []
    for k in range(c):
        support = [p for t, p in s if t == k]
        if support:
            vals.append(sum(1 for p in support if p == k) / len(support))
    return sum(vals) / len(vals)


def main():
    rng = random.Random(20240917)
    lines = []
    while len(lines) < 50:
        c = rng.choice([2, 3, 4, 5])
        counts = [rng.randint(0, 12) if rng.random() < 0.85 else 0 for _ in range(c * c)]
        s = samples(c, counts)
        try:
            vals = [
                rk(c, s),
                kappa(c, s, lambda i, j: 0.0 if i == j else 1.0),
                kappa(c, s, lambda i, j: (i - j) ** 2 / (c - 1) ** 2),
                specificity(c, s),
                balanced_accuracy(c, s),
            ]
        except ZeroDivisionError:
            continue
        lines.append(";".join([str(c), ",".join(map(str, counts))] + [repr(v) for v in vals]))
    sys.stdout.write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
