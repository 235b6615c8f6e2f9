"""Synthetic perception-like and composition tasks over visual+text tokens.

Every sequence is ``n_visual`` visual tokens followed by text tokens; the
answer is predicted at the final position. Text-local token layout::

    0 .. E-1        entities (E = visual_vocab); also the class tokens
    E               SURF marker  (surface question)
    E + 1           COMP marker  (two-hop question)
    E + 2 ..        filler / distractor tokens

surface:      [visual with a planted majority symbol s] [fillers] SURF  -> class(s)
composition:  [random visual] k1 v1 k2 v2 ... [distractors] COMP a  -> value(value(a))

All randomness comes from Philox generators keyed by (spec seed, kind, example
seed), so an example is a pure function of its spec and seed.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .backbone import TokenSequence

KINDS = ("surface", "composition")
TARGETS = ("majority", "first")
_KIND_TAG = {"surface": 1, "composition": 2}


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "surface"
    visual_vocab: int = 10
    text_vocab: int = 24
    n_visual: int = 8
    seq_len: int = 20
    n_facts: int = 3
    min_majority: int = 3
    max_majority: int = 0          # 0 means n_visual
    label_shift: int = 0
    target: str = "majority"       # surface label: majority symbol or first visual symbol
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")
        if self.visual_vocab < 2:
            raise ValueError("visual vocabulary must have at least 2 symbols")
        if self.text_vocab < self.visual_vocab + 3:
            raise ValueError("text vocabulary too small for entities, markers and one filler")
        if self.kind == "composition":
            if self.n_facts < 2:
                raise ValueError("composition needs at least 2 fact pairs")
            if self.n_facts > self.n_entities:
                raise ValueError("not enough entities to keep fact keys distinct")
        if self.n_distractors < 0:
            raise ValueError(f"seq_len={self.seq_len} too short for the layout")
        if not (1 <= self.min_majority <= self.top_majority <= self.n_visual):
            raise ValueError("need 1 <= min_majority <= max_majority <= n_visual")
        # a strict majority of count c needs the other n_visual - c tokens spread
        # over visual_vocab - 1 symbols with at most c - 1 copies each
        c = self.min_majority
        if (self.visual_vocab - 1) * (c - 1) < self.n_visual - c:
            raise ValueError("min_majority too small to avoid ties with this vocabulary")

    @property
    def top_majority(self) -> int:
        return self.max_majority or self.n_visual

    @property
    def n_entities(self) -> int:
        return self.visual_vocab

    @property
    def text_len(self) -> int:
        return self.seq_len - self.n_visual

    @property
    def n_distractors(self) -> int:
        if self.kind == "composition":
            return self.text_len - 2 * self.n_facts - 2
        return self.text_len - 1

    @property
    def n_fillers(self) -> int:
        return self.text_vocab - self.n_entities - 2

    # global token ids
    def entity(self, j: int) -> int:
        return self.visual_vocab + j

    @property
    def surf_marker(self) -> int:
        return self.visual_vocab + self.n_entities

    @property
    def comp_marker(self) -> int:
        return self.visual_vocab + self.n_entities + 1

    def filler(self, j: int) -> int:
        return self.visual_vocab + self.n_entities + 2 + j

    def class_of(self, symbol: int) -> int:
        """Answer token for visual symbol ``symbol`` under this spec's labelling."""
        return self.entity((symbol + self.label_shift) % self.n_entities)

    def answer_tokens(self) -> np.ndarray:
        """Every id an answer can take (the entity tokens)."""
        return np.arange(self.visual_vocab, self.visual_vocab + self.n_entities)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Example:
    seq: TokenSequence
    answer: int
    kind: str


def _rng(spec: TaskSpec, seed: int) -> np.random.Generator:
    ss = np.random.SeedSequence([spec.seed, _KIND_TAG[spec.kind], int(seed)])
    return np.random.Generator(np.random.Philox(ss))


def _make(spec: TaskSpec, visual_ids, text_ids, answer: int, kind: str) -> Example:
    ids = np.concatenate([np.asarray(visual_ids, np.int64), np.asarray(text_ids, np.int64)])
    vis = np.zeros(len(ids), dtype=bool)
    vis[: spec.n_visual] = True
    n = len(ids)
    return Example(TokenSequence(ids, vis, target_pos=n - 1, target_id=answer), answer, kind)


def gen_surface(spec: TaskSpec, seed: int) -> Example:
    """Visual tokens with a strict-majority symbol; answer is its class token."""
    if spec.kind != "surface":
        spec = replace(spec, kind="surface")
    r = _rng(spec, seed)
    nv, V = spec.n_visual, spec.visual_vocab
    s = int(r.integers(V))
    count = int(r.integers(spec.min_majority, spec.top_majority + 1))
    others = [x for x in range(V) if x != s]
    rest = []
    budget = {x: count - 1 for x in others}
    for _ in range(nv - count):
        choices = [x for x in others if budget[x] > 0]
        x = int(choices[r.integers(len(choices))])
        budget[x] -= 1
        rest.append(x)
    visual = np.array([s] * count + rest, dtype=np.int64)
    r.shuffle(visual)
    fillers = [spec.filler(int(j)) for j in r.integers(spec.n_fillers, size=spec.n_distractors)]
    text = fillers + [spec.surf_marker]
    label = s if spec.target == "majority" else int(visual[0])
    return _make(spec, visual, text, spec.class_of(label), "surface")


def gen_composition(spec: TaskSpec, seed: int) -> Example:
    """Fact pairs key->value, distractors, then COMP a; answer value(value(a)).

    Facts are resampled until the queried key starts a two-hop chain; the
    intermediate entity appears only inside the fact region.
    """
    if spec.kind != "composition":
        spec = replace(spec, kind="composition")
    r = _rng(spec, seed)
    E, P = spec.n_entities, spec.n_facts
    while True:
        keys = r.choice(E, size=P, replace=False)
        values = r.integers(E, size=P)
        facts = dict(zip(keys.tolist(), values.tolist()))
        starts = [a for a in facts if facts[a] in facts and facts[a] != a]
        if starts:
            break
    a = int(starts[r.integers(len(starts))])
    answer = facts[facts[a]]
    order = r.permutation(P)
    text = []
    for i in order:
        text += [spec.entity(int(keys[i])), spec.entity(int(values[i]))]
    text += [spec.filler(int(j)) for j in r.integers(spec.n_fillers, size=spec.n_distractors)]
    text += [spec.comp_marker, spec.entity(a)]
    visual = r.integers(spec.visual_vocab, size=spec.n_visual)
    return _make(spec, visual, text, spec.entity(answer), "composition")


def generate(spec: TaskSpec, seed: int) -> Example:
    return gen_surface(spec, seed) if spec.kind == "surface" else gen_composition(spec, seed)


@dataclass
class Batch:
    ids: np.ndarray
    visual: np.ndarray
    answers: np.ndarray
    kinds: list

    def __len__(self):
        return len(self.answers)


def collate(examples) -> Batch:
    lengths = {len(e.seq) for e in examples}
    if len(lengths) != 1:
        raise ValueError(f"examples have different lengths: {sorted(lengths)}")
    return Batch(
        ids=np.stack([e.seq.ids for e in examples]),
        visual=np.stack([e.seq.visual for e in examples]),
        answers=np.array([e.answer for e in examples], dtype=np.int64),
        kinds=[e.kind for e in examples],
    )


def make_dataset(spec: TaskSpec, n: int, start: int = 0) -> Batch:
    return collate([generate(spec, start + i) for i in range(n)])


# -- dump format -------------------------------------------------------------------

def dump_line(ex: Example) -> str:
    ids = " ".join(str(int(t)) for t in ex.seq.ids)
    bits = "".join("1" if v else "0" for v in ex.seq.visual)
    return f"{ex.kind}\t{ids}\t{bits}\t{ex.answer}"


def parse_line(line: str) -> Example:
    kind, ids, bits, answer = line.rstrip("\n").split("\t")
    tok = np.array([int(t) for t in ids.split()], dtype=np.int64)
    vis = np.array([c == "1" for c in bits], dtype=bool)
    ans = int(answer)
    return Example(TokenSequence(tok, vis, len(tok) - 1, ans), ans, kind)


def dump_dataset(examples, path) -> None:
    """Write one line per example, via a temporary file renamed into place."""
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        for ex in examples:
            fh.write(dump_line(ex) + "\n")
    os.replace(tmp, path)


def load_dataset(path) -> list:
    with open(path) as fh:
        return [parse_line(line) for line in fh if line.strip()]
