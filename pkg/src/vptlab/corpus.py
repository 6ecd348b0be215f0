"""Synthetic multi-reference code/summary corpus, vocabulary and JSONL I/O.

Each example is a small templated function paired with 4-5 paraphrased
summaries. A summary is an opener phrase, a body phrase naming the
function's arguments, and an optional closing phrase. Every example carries
a hidden preferred opener, usually tied to the function name, and all of its
references use that opener. Candidate sets that spread over openers can
therefore cover references that a set concentrated on one opener misses.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from vptlab.errors import DataError

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, SEP = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>", "<sep>")


@dataclass(frozen=True)
class Example:
    id: str
    code: tuple[str, ...]
    refs: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.code:
            raise DataError(f"{self.id}: empty code")
        if not self.refs or any(not r for r in self.refs):
            raise DataError(f"{self.id}: empty reference list or empty reference")
        if len(set(self.refs)) != len(self.refs):
            raise DataError(f"{self.id}: duplicate references")

    @classmethod
    def from_text(cls, id: str, code: str, refs: Sequence[str]) -> "Example":
        return cls(id, tuple(tokenize(code)), tuple(tuple(tokenize(r)) for r in refs))

    def to_json(self) -> dict:
        return {"id": self.id, "code": " ".join(self.code), "refs": [" ".join(r) for r in self.refs]}


@dataclass
class Splits:
    train: list[Example]
    valid: list[Example]
    test: list[Example]

    def __iter__(self):
        return iter((("train", self.train), ("valid", self.valid), ("test", self.test)))


# tokenization -----------------------------------------------------------------


def tokenize(text: str) -> list[str]:
    return text.split()


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


@dataclass
class Vocabulary:
    """Token/id map with reserved ids for the five special tokens."""

    tokens: list[str] = field(default_factory=lambda: list(SPECIAL_TOKENS))

    def __post_init__(self):
        if tuple(self.tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the special tokens")
        self._index = {t: i for i, t in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise DataError("vocabulary has duplicate tokens")

    @classmethod
    def build(cls, examples: Iterable[Example]) -> "Vocabulary":
        seen: set[str] = set()
        for ex in examples:
            seen.update(ex.code)
            for r in ex.refs:
                seen.update(r)
        seen.difference_update(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + sorted(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        return self._index.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self._index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, EOS):
                continue
            out.append(self.tokens[i])
        return out

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def decode_text(self, ids: Iterable[int]) -> str:
        return detokenize(self.decode(ids))


# generator --------------------------------------------------------------------

# (code body, argument count, body paraphrases)
TEMPLATES: dict[str, tuple[tuple[str, ...], int, tuple[str, ...]]] = {
    "add": (
        ("return {a} + {b}", "result = {a} + {b} ; return result"),
        2,
        ("the sum of {a} and {b}", "{a} plus {b}", "the result of adding {b} to {a}"),
    ),
    "sub": (
        ("return {a} - {b}", "result = {a} - {b} ; return result"),
        2,
        ("the difference of {a} and {b}", "{a} minus {b}", "the result of subtracting {b} from {a}"),
    ),
    "mul": (
        ("return {a} * {b}", "result = {a} * {b} ; return result"),
        2,
        ("the product of {a} and {b}", "{a} times {b}", "the result of multiplying {a} by {b}"),
    ),
    "div": (
        ("return {a} / {b}", "result = {a} / {b} ; return result"),
        2,
        ("the quotient of {a} and {b}", "{a} divided by {b}", "the result of dividing {a} by {b}"),
    ),
    "max": (
        ("return max ( {a} , {b} )", "return {a} if {a} > {b} else {b}"),
        2,
        ("the larger of {a} and {b}", "the maximum of {a} and {b}", "whichever of {a} and {b} is bigger"),
    ),
    "min": (
        ("return min ( {a} , {b} )", "return {a} if {a} < {b} else {b}"),
        2,
        ("the smaller of {a} and {b}", "the minimum of {a} and {b}", "whichever of {a} and {b} is smaller"),
    ),
    "concat": (
        ("return str ( {a} ) + str ( {b} )", "return '' . join ( [ {a} , {b} ] )"),
        2,
        ("the concatenation of {a} and {b}", "{a} joined with {b}", "a string made of {a} followed by {b}"),
    ),
    "contains": (
        ("return {a} in {b}", "return {b} . count ( {a} ) > 0"),
        2,
        ("whether {a} is in {b}", "true if {b} contains {a}", "a flag telling if {a} occurs in {b}"),
    ),
    "append": (
        ("{b} . append ( {a} ) ; return {b}", "return {b} + [ {a} ]"),
        2,
        ("the list {b} with {a} appended", "{b} after adding {a} to the end", "a list holding {b} then {a}"),
    ),
    "length": (
        ("return len ( {a} )", "return sum ( 1 for _ in {a} )"),
        1,
        ("the length of {a}", "the number of items in {a}", "how many elements {a} has"),
    ),
    "square": (
        ("return {a} * {a}", "return {a} ** 2"),
        1,
        ("the square of {a}", "{a} multiplied by itself", "{a} raised to the power two"),
    ),
    "abs": (
        ("return abs ( {a} )", "return {a} if {a} >= 0 else - {a}"),
        1,
        ("the absolute value of {a}", "{a} without its sign", "the magnitude of {a}"),
    ),
    "reverse": (
        ("return {a} [ : : - 1 ]", "return list ( reversed ( {a} ) )"),
        1,
        ("{a} in reverse order", "the reversed copy of {a}", "the items of {a} backwards"),
    ),
    "is_empty": (
        ("return len ( {a} ) == 0", "return not {a}"),
        1,
        ("whether {a} is empty", "true if {a} has no items", "a flag telling if {a} holds nothing"),
    ),
}

OPENERS: tuple[str, ...] = (
    "returns",
    "computes",
    "this function returns",
    "gets",
    "calculates and returns",
    "produces",
    "outputs",
    "yields",
    "gives back",
    "determines",
)

FUNCTION_NAMES = (
    "helper", "process", "compute", "run", "handle", "apply_op", "calc", "func", "op", "evaluate",
    "transform", "do_work", "step", "make", "build", "solve", "check", "get_value", "combine", "work",
)

VARIABLE_NAMES = (
    "x", "y", "z", "a", "b", "n", "m", "k", "val", "num", "left", "right", "first", "second", "item",
    "items", "data", "values", "total", "count", "size", "text", "word", "name", "key", "seq", "arr",
    "lst", "other", "base", "part", "amount", "score", "limit", "elem", "obj",
)


CLOSINGS: tuple[str, ...] = ("", "as the result")


def paraphrase_bank(template: str, args: dict[str, str]) -> list[tuple[str, ...]]:
    """All opener x body x closing paraphrases for one template instance, opener-major."""
    bodies = TEMPLATES[template][2]
    return [
        tuple(f"{op} {body.format(**args)} {close}".split())
        for op in OPENERS
        for body in bodies
        for close in CLOSINGS
    ]


def generate_corpus(
    seed: int,
    n_examples: int,
    refs_per_example: tuple[int, int] = (4, 5),
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
    opener_bias: float = 0.6,
) -> Splits:
    """Deterministically generate ``n_examples`` unique examples and split them.

    Each example draws between ``refs_per_example[0]`` and
    ``refs_per_example[1]`` distinct references from its opener group.
    Splits are by example, and every code string is unique across the whole
    corpus. With probability ``opener_bias`` the
    preferred opener is the one tied to the function name, otherwise it is
    drawn uniformly, so the opener is learnable but not determined.
    """
    if n_examples < 10:
        raise ValueError("n_examples must be at least 10")
    if not 0.0 <= opener_bias <= 1.0:
        raise ValueError("opener_bias must lie in [0, 1]")
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    rng = np.random.default_rng(seed)
    names = sorted(TEMPLATES)
    group = len(TEMPLATES[names[0]][2]) * len(CLOSINGS)
    lo, hi = refs_per_example
    if not 1 <= lo <= hi <= group:
        raise ValueError(f"refs_per_example must satisfy 1 <= lo <= hi <= {group}")
    seen_code: set[tuple[str, ...]] = set()
    examples: list[Example] = []
    attempts = 0
    while len(examples) < n_examples:
        attempts += 1
        if attempts > 50 * n_examples:
            raise RuntimeError("could not generate enough unique examples")
        template = names[int(rng.integers(len(names)))]
        code_forms, arity, _ = TEMPLATES[template]
        form = code_forms[int(rng.integers(len(code_forms)))]
        picks = rng.choice(len(VARIABLE_NAMES), size=arity, replace=False)
        args = {k: VARIABLE_NAMES[int(i)] for k, i in zip("ab", picks)}
        fn = FUNCTION_NAMES[int(rng.integers(len(FUNCTION_NAMES)))]
        params = " , ".join(args[k] for k in "ab"[:arity])
        code = tuple(f"def {fn} ( {params} ) : {form.format(**args)}".split())
        if code in seen_code:
            continue
        seen_code.add(code)

        bank = paraphrase_bank(template, args)
        if rng.random() < opener_bias:
            preferred = FUNCTION_NAMES.index(fn) % len(OPENERS)
        else:
            preferred = int(rng.integers(len(OPENERS)))
        n_refs = int(rng.integers(lo, hi + 1))
        chosen = sorted(int(i) for i in rng.choice(group, size=n_refs, replace=False))
        refs = tuple(bank[preferred * group + i] for i in chosen)
        examples.append(Example(f"ex{len(examples):05d}", code, refs))

    n_train = int(round(split_fractions[0] * n_examples))
    n_valid = int(round(split_fractions[1] * n_examples))
    order = rng.permutation(n_examples)
    shuffled = [examples[i] for i in order]
    return Splits(
        train=shuffled[:n_train],
        valid=shuffled[n_train : n_train + n_valid],
        test=shuffled[n_train + n_valid :],
    )


# JSONL I/O --------------------------------------------------------------------


def save_jsonl(path: str | Path, examples: Iterable[Example]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")
    tmp.replace(path)


def _parse_line(line: str, lineno: int) -> Example:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    for key in ("id", "code", "refs"):
        if key not in obj:
            raise DataError(f"line {lineno}: missing field {key!r}")
    refs = obj["refs"]
    if not isinstance(refs, list) or not refs or not all(isinstance(r, str) and r.strip() for r in refs):
        raise DataError(f"line {lineno}: 'refs' must be a non-empty list of non-empty strings")
    if not isinstance(obj["code"], str) or not obj["code"].strip():
        raise DataError(f"line {lineno}: 'code' must be a non-empty string")
    try:
        return Example.from_text(str(obj["id"]), obj["code"], refs)
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None


def load_jsonl(path: str | Path, lenient: bool = False) -> list[Example] | tuple[list[Example], list[str]]:
    """Load examples; raise on the first bad line, or collect errors when ``lenient``.

    In lenient mode the return value is ``(examples, errors)``.
    """
    examples: list[Example] = []
    errors: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                examples.append(_parse_line(line, lineno))
            except DataError as exc:
                if not lenient:
                    raise
                errors.append(str(exc))
                log.warning("skipping %s", exc)
    if lenient:
        return examples, errors
    return examples


def save_splits(directory: str | Path, splits: Splits) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, examples in splits:
        save_jsonl(directory / f"{name}.jsonl", examples)


def load_splits(directory: str | Path) -> Splits:
    directory = Path(directory)
    return Splits(*(load_jsonl(directory / f"{name}.jsonl") for name in ("train", "valid", "test")))
