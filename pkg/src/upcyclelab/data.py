"""Synthetic byte corpora and the small multiple-choice evaluation suite.

``generic_corpus`` stands in for broad web text used in dense pretraining;
``domain_corpus`` is the different, more structured mix used for continued
pretraining and upcycling.  The evaluation tasks are drawn from the domain
formats with a separate random stream, so they measure skill the second
phase teaches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Checkpoint, sequence_logprob
from .numerics import RngStream
from .trainer import core_average

_WORDS = (
    "the of and to in is was for on that with as by at from his it an were are which this be or "
    "has had not but first new one their its after who two they been have also all time other more "
    "city state year world school team people river north water house music number family system "
    "group small light early great under between during against large local"
).split()


def encode(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def decode(tokens) -> str:
    return bytes(np.asarray(tokens, dtype=np.uint8)).decode("utf-8", errors="replace")


def generic_corpus(n_tokens: int, rng: RngStream) -> np.ndarray:
    """Zipf-weighted word salad with sentence punctuation."""
    gen = rng.generator()
    ranks = np.arange(1, len(_WORDS) + 1)
    probs = 1.0 / ranks
    probs /= probs.sum()
    parts = []
    size = 0
    while size < n_tokens:
        n = int(gen.integers(5, 13))
        words = [_WORDS[i] for i in gen.choice(len(_WORDS), size=n, p=probs)]
        s = " ".join(words).capitalize() + ". "
        parts.append(s)
        size += len(s)
    return encode("".join(parts))[:n_tokens]


_ALNUM = "abcdefghijklmnopqrstuvwxyz0123456789"


def _rand_word(gen, lo=3, hi=6) -> str:
    n = int(gen.integers(lo, hi + 1))
    return "".join(_ALNUM[i] for i in gen.integers(0, len(_ALNUM), n))


def copy_line(gen) -> tuple[str, str]:
    w = _rand_word(gen)
    return f"copy {w} > ", w + "\n"


def add_line(gen) -> tuple[str, str]:
    a, b = (int(v) for v in gen.integers(0, 10, 2))
    return f"add {a}+{b}=", f"{(a + b) % 10}\n"


def induction_line(gen) -> tuple[str, str]:
    keys = gen.choice(26, size=3, replace=False)
    vals = gen.integers(0, 10, 3)
    pairs = " ".join(f"{chr(97 + k)}{v}" for k, v in zip(keys, vals))
    q = int(gen.integers(0, 3))
    return f"find {pairs} ; {chr(97 + keys[q])}", f"{vals[q]}\n"


def code_line(gen) -> tuple[str, str]:
    name = _rand_word(gen, 2, 4)
    k = int(gen.integers(2, 10))
    return f"def {name}(x): return x*{k}", "\n"


_DOMAIN_MIX = ((copy_line, 0.3), (add_line, 0.25), (induction_line, 0.25), (code_line, 0.2))


def domain_corpus(n_tokens: int, rng: RngStream) -> np.ndarray:
    """Lines of copy, modular addition, key lookup and code-like text."""
    gen = rng.generator()
    makers = [m for m, _ in _DOMAIN_MIX]
    weights = np.array([w for _, w in _DOMAIN_MIX])
    parts = []
    size = 0
    while size < n_tokens:
        prompt, answer = makers[int(gen.choice(len(makers), p=weights))](gen)
        parts.append(prompt + answer)
        size += len(parts[-1])
    return encode("".join(parts))[:n_tokens]


# ---------------------------------------------------------------------------
# Multiple-choice evaluation
# ---------------------------------------------------------------------------


@dataclass
class MCItem:
    context: str
    choices: list[str]
    answer: int


@dataclass
class MCTask:
    name: str
    items: list[MCItem]

    @property
    def baseline(self) -> float:
        return 1.0 / len(self.items[0].choices)


def _mc(gen, prompt: str, answer: str, distractors: list[str]) -> MCItem:
    choices = [answer] + distractors
    order = gen.permutation(len(choices))
    return MCItem(prompt, [choices[i] for i in order], int(np.argmax(order == 0)))


def build_tasks(rng: RngStream, n_items: int = 48) -> list[MCTask]:
    """Copy, induction and modular-addition tasks with four choices each."""
    tasks = []
    gen = rng.split("copy").generator()
    items = []
    for _ in range(n_items):
        p, a = copy_line(gen)
        word = a.strip()
        distract = []
        while len(distract) < 3:
            w = _rand_word(gen, len(word), len(word))
            if w != word and w not in distract:
                distract.append(w)
        items.append(_mc(gen, p, word, distract))
    tasks.append(MCTask("copy", items))

    gen = rng.split("induction").generator()
    items = []
    for _ in range(n_items):
        p, a = induction_line(gen)
        ans = a.strip()
        others = [str(d) for d in gen.permutation(10) if str(d) != ans][:3]
        items.append(_mc(gen, p, ans, others))
    tasks.append(MCTask("induction", items))

    gen = rng.split("modadd").generator()
    items = []
    for _ in range(n_items):
        p, a = add_line(gen)
        ans = a.strip()
        others = [str(d) for d in gen.permutation(10) if str(d) != ans][:3]
        items.append(_mc(gen, p, ans, others))
    tasks.append(MCTask("modadd", items))
    return tasks


def score_task(ckpt: Checkpoint, task: MCTask) -> float:
    """Accuracy: an item is correct when the right choice has the highest total log-probability."""
    correct = 0
    for item in task.items:
        seqs = [encode(item.context + c) for c in item.choices]
        ctx_len = len(encode(item.context))
        width = max(len(s) for s in seqs)
        # left-pad with newlines so continuations are aligned at the right edge
        batch = np.full((len(seqs), width), ord("\n"), dtype=np.int64)
        for i, s in enumerate(seqs):
            batch[i, width - len(s):] = s
        lp = sequence_logprob(ckpt, batch)
        scores = []
        for i, s in enumerate(seqs):
            cont = len(s) - ctx_len
            scores.append(float(lp[i, -cont:].sum()))
        correct += int(np.argmax(scores) == item.answer)
    return correct / len(task.items)


def evaluate(ckpt: Checkpoint, tasks: list[MCTask]) -> dict:
    accs = {t.name: score_task(ckpt, t) for t in tasks}
    return {
        "tasks": accs,
        "core_avg": core_average([accs[t.name] for t in tasks], [t.baseline for t in tasks]),
    }
