"""Character-level next-symbol datasets with one client per speaking role."""
from __future__ import annotations

import re

import numpy as np

from .datasets import Dataset, concat

# 80 symbols; the last one ("}") doubles as the out-of-vocabulary slot.
VOCAB = "\n !\"&'(),-.0123456789:;>?ABCDEFGHIJKLMNOPQRSTUVWXYZ[]abcdefghijklmnopqrstuvwxyz}"
OOV = len(VOCAB) - 1
_INDEX = {ch: i for i, ch in enumerate(VOCAB)}

_ROLE_LINE = re.compile(r"^\s*([A-Z][A-Z' ]*[A-Z])\.\s?(.*)$")


def encode(text):
    return np.array([_INDEX.get(ch, OOV) for ch in text], dtype=np.int64)


def decode(tokens):
    return "".join(VOCAB[int(t)] for t in tokens)


def parse_roles(text):
    """Map role name -> spoken text, from lines starting ``NAME.``.

    Lines that do not open a new speech continue the current one.  Text with no
    role markers at all is returned as a single anonymous role.
    """
    roles: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        m = _ROLE_LINE.match(line)
        if m:
            current = m.group(1)
            roles.setdefault(current, []).append(m.group(2))
        elif current is not None and line.strip():
            roles[current].append(line.strip())
    if not roles:
        return {"": text}
    return {name: "\n".join(lines) for name, lines in roles.items()}


def windows(tokens, seq_len):
    """``(inputs, next_symbol)`` pairs for every length-``seq_len`` window."""
    n = len(tokens) - seq_len
    if n <= 0:
        return np.zeros((0, seq_len), dtype=np.int64), np.zeros(0, dtype=np.int64)
    idx = np.arange(seq_len)[None, :] + np.arange(n)[:, None]
    return tokens[idx], tokens[seq_len:]


def char_text_dataset(text, seq_len=80, clients=None, min_points=10_000, train_frac=0.8, seed=0):
    """Per-role next-character datasets.

    Roles with fewer than ``min_points`` windows are dropped; if ``clients`` is
    given, that many of the remaining roles are sampled.  Each role's windows
    are split in order, the first ``train_frac`` for training and the rest
    pooled into a global test set.  Returns ``(train_sets, test_set, roles)``.
    """
    roles = parse_roles(text)
    kept = []
    for name, body in roles.items():
        x, y = windows(encode(body), seq_len)
        if len(y) >= max(min_points, 1):
            kept.append((name, x, y))
    if clients is not None and clients < len(kept):
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(kept), size=clients, replace=False))
        kept = [kept[i] for i in pick]
    train, test = [], []
    for _, x, y in kept:
        cut = int(round(train_frac * len(y)))
        train.append(Dataset(x[:cut], y[:cut], len(VOCAB)))
        test.append(Dataset(x[cut:], y[cut:], len(VOCAB)))
    test_set = concat(test) if test else Dataset(np.zeros((0, seq_len), np.int64), [], len(VOCAB))
    return train, test_set, [name for name, _, _ in kept]
