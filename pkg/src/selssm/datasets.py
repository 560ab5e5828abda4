"""Synthetic tasks (majority, ListOps) and a JSONL loader for tokenized text."""

import json
import math
import logging
import statistics
from dataclasses import dataclass, field

import numpy as np

from .artifacts import atomic_write_text
from .errors import DataError, GenerationError, ParameterError, ParseError

log = logging.getLogger(__name__)

PAD = "<pad>"
PAD_ID = 0

LISTOPS_OPS = ("MAX", "MIN", "MED", "SUM")
LISTOPS_TOKENS = (PAD, *"0123456789", "[", "]", "(", ")", *LISTOPS_OPS)


@dataclass
class LabeledSequence:
    tokens: list
    label: int


@dataclass
class DatasetSplit:
    examples: list
    T: int
    vocab_size: int
    num_classes: int

    def __len__(self):
        return len(self.examples)

    def arrays(self):
        """(tokens (m, T) int64, labels (m,) int64)."""
        tokens = np.array([ex.tokens for ex in self.examples], dtype=np.int64).reshape(len(self), self.T)
        labels = np.array([ex.label for ex in self.examples], dtype=np.int64)
        return tokens, labels

    def label_counts(self):
        counts = [0] * self.num_classes
        for ex in self.examples:
            counts[ex.label] += 1
        return counts


@dataclass
class Vocabulary:
    token_to_id: dict = field(default_factory=lambda: {PAD: PAD_ID})

    def __post_init__(self):
        if self.token_to_id.get(PAD) != PAD_ID:
            raise DataError(f"vocabulary must map {PAD!r} to {PAD_ID}")
        ids = list(self.token_to_id.values())
        if len(set(ids)) != len(ids):
            raise DataError("vocabulary ids are not unique")
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    @classmethod
    def from_tokens(cls, tokens):
        mapping = {PAD: PAD_ID}
        for tok in tokens:
            if tok not in mapping:
                mapping[tok] = len(mapping)
        return cls(mapping)

    def __len__(self):
        return max(self.token_to_id.values()) + 1

    def __contains__(self, token):
        return token in self.token_to_id

    def encode(self, tokens):
        return [self.token_to_id[t] for t in tokens]

    def decode(self, ids):
        return [self.id_to_token[i] for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.token_to_id, fh, indent=0, sort_keys=False)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))


MAJORITY_VOCAB = Vocabulary({PAD: 0, "1": 1})
LISTOPS_VOCAB = Vocabulary.from_tokens(LISTOPS_TOKENS[1:])


def majority_label(tokens):
    """1 iff the 0/1 sequence holds more ones than zeros."""
    ones = int(np.count_nonzero(np.asarray(tokens) == 1))
    return int(ones > len(tokens) - ones)


def gen_majority(m, T, flip_frac=0.0, seed=0):
    """Binary sequences labeled 1 iff they hold more ones than zeros.

    The one-count k of each sequence is uniform on 0..T. Labels are assigned
    first; afterwards round(flip_frac * k) of the ones, chosen at random, are
    flipped to zero (pass 0 for test splits).
    """
    if not 0.0 <= flip_frac < 1.0:
        raise ParameterError("flip_frac must lie in [0, 1)")
    # separate noise stream: a clean and a noisy split from one seed pair up
    rng, noise_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    examples = []
    for _ in range(m):
        k = int(rng.integers(0, T + 1))
        seq = np.zeros(T, dtype=np.int64)
        seq[rng.choice(T, size=k, replace=False)] = 1
        label = majority_label(seq)
        n_flip = int(math.floor(flip_frac * k + 0.5))
        if n_flip:
            seq[noise_rng.choice(np.flatnonzero(seq), size=n_flip, replace=False)] = 0
        examples.append(LabeledSequence(seq.tolist(), label))
    return DatasetSplit(examples, T=T, vocab_size=2, num_classes=2)


def tokenize_listops(text):
    """Split ``"[MIN 5 [MAX 2 9] 0]"`` into bracket, operator and digit tokens."""
    for ch in "[]()":
        text = text.replace(ch, f" {ch} ")
    return text.split()


def eval_listops(expr):
    """Evaluate a bracketed ListOps expression given as a token list (or string).

    MED takes the lower median; SUM is the sum modulo 10. Parentheses are
    ignored, so the parenthesized long-range-arena layout is accepted too.
    """
    tokens = tokenize_listops(expr) if isinstance(expr, str) else list(expr)
    stack = []
    result = None
    for pos, tok in enumerate(tokens):
        if tok in ("(", ")"):
            continue
        if result is not None:
            raise ParseError("tokens after complete expression", position=pos)
        if tok == "[":
            stack.append(None)
        elif tok in LISTOPS_OPS:
            if not stack or stack[-1] is not None:
                raise ParseError(f"operator {tok} not preceded by '['", position=pos)
            stack[-1] = (tok, [])
        elif tok == "]":
            if not stack or stack[-1] is None:
                raise ParseError("unbalanced ']'", position=pos)
            op, args = stack.pop()
            if not args:
                raise ParseError(f"{op} without arguments", position=pos)
            value = _apply(op, args)
            if stack:
                stack[-1][1].append(value)
            else:
                result = value
        elif len(tok) == 1 and tok.isdigit():
            if not stack:
                if len(tokens) == 1:
                    return int(tok)
                raise ParseError("digit outside an operator", position=pos)
            if stack[-1] is None:
                raise ParseError("digit where an operator was expected", position=pos)
            stack[-1][1].append(int(tok))
        else:
            raise ParseError(f"unknown token {tok!r}", position=pos)
    if result is None:
        raise ParseError("incomplete expression", position=len(tokens))
    return result


def _apply(op, args):
    if op == "MAX":
        return max(args)
    if op == "MIN":
        return min(args)
    if op == "MED":
        return statistics.median_low(args)
    return sum(args) % 10


def _build_listops(length, rng, max_args):
    """Random expression of exactly ``length`` tokens (length == 1 or >= 4)."""
    if length == 1:
        return [str(int(rng.integers(10)))]
    budget = length - 3
    k = int(rng.integers(min(2, budget), min(max_args, budget) + 1))
    extra = budget - k
    if 0 < extra < 3:
        if k + extra <= max_args:
            k += extra
        else:
            k -= 3 - extra
        extra = budget - k
    sizes = [1] * k
    if extra:
        n_big = int(rng.integers(1, min(k, extra // 3) + 1))
        big = rng.choice(k, size=n_big, replace=False)
        shares = 3 + rng.multinomial(extra - 3 * n_big, [1.0 / n_big] * n_big)
        for i, s in zip(big, shares):
            sizes[i] += int(s)
    out = ["[", str(rng.choice(LISTOPS_OPS))]
    for s in sizes:
        out.extend(_build_listops(s, rng, max_args))
    out.append("]")
    return out


def gen_listops(m, T_target, seed=0, max_args=10, retries=10):
    """ListOps expressions of token length in [T_target - 5, T_target + 5], padded to T_target + 5."""
    if T_target < 10:
        raise ParameterError("T_target must be at least 10")
    rng = np.random.default_rng(seed)
    T = T_target + 5
    examples = []
    for _ in range(m):
        for _attempt in range(retries):
            expr = _build_listops(int(rng.integers(T_target - 5, T_target + 6)), rng, max_args)
            if T_target - 5 <= len(expr) <= T:
                break
        else:
            raise GenerationError(f"could not build an expression of length ~{T_target}")
        ids = LISTOPS_VOCAB.encode(expr)
        examples.append(LabeledSequence(ids + [PAD_ID] * (T - len(ids)), eval_listops(expr)))
    return DatasetSplit(examples, T=T, vocab_size=len(LISTOPS_VOCAB), num_classes=10)


def pad_or_truncate(ids, T):
    ids = list(ids[:T])
    return ids + [PAD_ID] * (T - len(ids))


def load_text_jsonl(path, vocab, T, strict=True):
    """Read ``{"tokens": [...], "label": int}`` lines, right-pad/truncate to length T.

    String tokens go through ``vocab``; an unknown one raises in strict mode and
    is dropped otherwise. Integer tokens are taken as ids.
    """
    examples = []
    max_id = len(vocab) - 1
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                raw, label = doc["tokens"], int(doc["label"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed record: {exc}", line=lineno) from None
            ids = []
            for tok in raw:
                if isinstance(tok, str):
                    if tok in vocab:
                        ids.append(vocab.token_to_id[tok])
                    elif strict:
                        raise DataError(f"unknown token {tok!r} on line {lineno}")
                elif isinstance(tok, int) and tok >= 0:
                    ids.append(tok)
                else:
                    raise ParseError(f"bad token {tok!r}", line=lineno)
            if label < 0:
                raise ParseError("negative label", line=lineno)
            ids = pad_or_truncate(ids, T)
            max_id = max([max_id, *ids])
            examples.append(LabeledSequence(ids, label))
    if not examples:
        log.warning("no examples in %s", path)
    num_classes = max((ex.label for ex in examples), default=0) + 1
    return DatasetSplit(examples, T=T, vocab_size=max_id + 1, num_classes=num_classes)


def write_jsonl(split, path):
    lines = [json.dumps({"tokens": [int(t) for t in ex.tokens], "label": int(ex.label)}) for ex in split.examples]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def balanced_subset(split, frac, seed):
    """Stratified sample of ``frac`` of the split with equal counts per label where possible."""
    if not 0 < frac <= 1:
        raise ParameterError("frac must lie in (0, 1]")
    if frac == 1:
        return split
    rng = np.random.default_rng(seed)
    target = max(1, int(round(frac * len(split))))
    by_label = {}
    for i, ex in enumerate(split.examples):
        by_label.setdefault(ex.label, []).append(i)
    labels = sorted(by_label)
    quota = {lab: 0 for lab in labels}
    remaining = target
    # round-robin so class counts differ by at most one unless a class runs out
    while remaining > 0:
        progressed = False
        for lab in labels:
            if remaining and quota[lab] < len(by_label[lab]):
                quota[lab] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    chosen = []
    for lab in labels:
        idx = by_label[lab]
        chosen.extend(int(i) for i in rng.choice(idx, size=quota[lab], replace=False))
    chosen.sort()
    return DatasetSplit([split.examples[i] for i in chosen], split.T, split.vocab_size, split.num_classes)


def same_shape(a, b):
    return a.T == b.T and a.vocab_size == b.vocab_size and a.num_classes == b.num_classes
