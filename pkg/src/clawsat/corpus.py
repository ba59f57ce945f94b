"""Corpus handling: tokenization, vocabulary, JSONL I/O, toy generator, splits.

The supported language is a statement-oriented Python subset: one function
per program, with assignments, augmented assignments, for/if/else blocks,
calls, and returns. Tokens carry no whitespace; line structure is encoded
explicitly with the ``<nl>`` / ``<ind>`` / ``<ded>`` marker tokens so that
statement boundaries survive in the flat token stream and detokenization
reproduces runnable source.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, DuplicateId, EmptyCorpus, MalformedSource, ParseError
from .seeding import rng_for

NEWLINE = "<nl>"
INDENT = "<ind>"
DEDENT = "<ded>"
STRUCTURE_TOKENS = (NEWLINE, INDENT, DEDENT)

# Python keywords accepted by the subset. Never renameable, never payloads.
KEYWORDS = frozenset(
    "def return for in if elif else and or not True False None "
    "while break continue pass".split()
)

# Builtins the toy programs may call. They are free names, not sites, and
# are excluded from payload candidates so a rename can never capture them.
BUILTINS = frozenset("print range len abs min max int str list sum enumerate sorted".split())

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUMBER_RE = re.compile(r"\d+(?:\.\d+)?")
_MULTI_OPS = ("**", "//", "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "%=", "->")
_SINGLE_OPS = set("+-*/%<>=()[]{}:,.;")


def is_bindable_name(text: str) -> bool:
    """Identifier-shaped and not a keyword; may shadow a builtin (legal)."""
    return _IDENT_RE.fullmatch(text) is not None and text not in KEYWORDS


def is_identifier_token(text: str) -> bool:
    """Identifier-shaped and not reserved; the only legal rename payloads."""
    return is_bindable_name(text) and text not in BUILTINS


def is_string_token(text: str) -> bool:
    return len(text) >= 2 and text[0] in "\"'" and text[-1] == text[0]


def _is_operator_token(text: str) -> bool:
    return text in _MULTI_OPS or (len(text) == 1 and text in _SINGLE_OPS)


def quote_word(word: str) -> str:
    """The string-literal token that prints the given bare word."""
    return f'"{word}"'


def _lex_line(line: str, line_no: int) -> list[str]:
    tokens: list[str] = []
    i, n = 0, len(line)
    while i < n:
        ch = line[i]
        if ch == " ":
            i += 1
            continue
        if ch == "\t":
            raise MalformedSource(f"line {line_no}: tab characters are not supported")
        if ch.isalpha() or ch == "_":
            m = _IDENT_RE.match(line, i)
            tokens.append(m.group())
            i = m.end()
            continue
        if ch.isdigit():
            m = _NUMBER_RE.match(line, i)
            tokens.append(m.group())
            i = m.end()
            continue
        if ch in "\"'":
            end = line.find(ch, i + 1)
            if end < 0:
                raise MalformedSource(f"line {line_no}: unterminated string literal")
            body = line[i + 1 : end]
            if any(c.isspace() for c in body) or "\\" in body:
                raise MalformedSource(
                    f"line {line_no}: string literals may not contain whitespace or escapes"
                )
            tokens.append(line[i : end + 1])
            i = end + 1
            continue
        two = line[i : i + 2]
        if two in _MULTI_OPS:
            tokens.append(two)
            i += 2
            continue
        if ch in _SINGLE_OPS:
            tokens.append(ch)
            i += 1
            continue
        raise MalformedSource(f"line {line_no}: illegal character {ch!r}")
    return tokens


def tokenize(source: str) -> list[str]:
    """Tokenize source text, folding line structure into marker tokens.

    Whitespace and delimiters never become tokens themselves; indentation
    changes become ``<ind>``/``<ded>`` and same-level line breaks ``<nl>``.
    Raises MalformedSource for empty input, bad literals, or inconsistent
    indentation.
    """
    if not source.strip():
        raise MalformedSource("empty source")
    tokens: list[str] = []
    indent_stack = [0]
    first_line = True
    for line_no, raw in enumerate(source.splitlines(), start=1):
        if not raw.strip():
            continue
        if "\t" in raw:
            raise MalformedSource(f"line {line_no}: tab characters are not supported")
        stripped = raw.lstrip(" ")
        pad = len(raw) - len(stripped)
        if first_line:
            if pad != 0:
                raise MalformedSource(f"line {line_no}: first statement must not be indented")
            first_line = False
        elif pad > indent_stack[-1]:
            indent_stack.append(pad)
            tokens.append(INDENT)
        elif pad == indent_stack[-1]:
            tokens.append(NEWLINE)
        else:
            while len(indent_stack) > 1 and pad < indent_stack[-1]:
                indent_stack.pop()
                tokens.append(DEDENT)
            if indent_stack[-1] != pad:
                raise MalformedSource(f"line {line_no}: inconsistent indentation")
        tokens.extend(_lex_line(stripped, line_no))
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    """Render a token stream back to runnable source (4-space indents)."""
    lines: list[str] = []
    current: list[str] = []
    level = 0

    def flush():
        if current:
            lines.append("    " * level + " ".join(current))
            current.clear()

    for tok in tokens:
        if tok == NEWLINE:
            flush()
        elif tok == INDENT:
            flush()
            level += 1
        elif tok == DEDENT:
            flush()
            level -= 1
            if level < 0:
                raise MalformedSource("dedent below top level")
        else:
            current.append(tok)
    flush()
    return "\n".join(lines)


@dataclass(frozen=True)
class Token:
    """A vocabulary entry: token text plus its id."""

    text: str
    id: int


@dataclass
class Program:
    """One tokenized source function with its gold summary."""

    id: str
    tokens: list[str]
    source: str
    summary: list[str]
    # Transformation sites, filled lazily by transform.sites_of().
    sites: list | None = field(default=None, compare=False, repr=False)


@dataclass
class CorpusSplit:
    train: list[Program]
    valid: list[Program]
    test: list[Program]
    seed: int

    def all_programs(self) -> list[Program]:
        return self.train + self.valid + self.test


class Vocabulary:
    """Bidirectional token<->id mapping with reserved special ids 0-3."""

    PAD, UNK, BOS, EOS = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")

    def __init__(self, words: Sequence[str]):
        self.tokens: list[str] = list(self.SPECIALS) + list(words)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self._identifier_ids: tuple[int, ...] | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, text: str) -> bool:
        return text in self.index

    def encode(self, texts: Iterable[str]) -> list[int]:
        unk = self.UNK
        return [self.index.get(t, unk) for t in texts]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise ConfigError(f"id {i} outside vocabulary of size {len(self.tokens)}")
            out.append(self.tokens[i])
        return out

    def identifier_candidate_ids(self) -> tuple[int, ...]:
        """Ids of identifier-eligible tokens (rename/insert payload pool)."""
        if self._identifier_ids is None:
            self._identifier_ids = tuple(
                i
                for i in range(4, len(self.tokens))
                if is_identifier_token(self.tokens[i])
            )
        return self._identifier_ids

    def string_token_id(self, word: str) -> int:
        """Id of the quoted form of a word; UNK when never seen in corpus."""
        return self.index.get(quote_word(word), self.UNK)

    def content_hash(self) -> str:
        payload = "\n".join(self.tokens).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:4] != list(cls.SPECIALS):
            raise ConfigError(f"{path}: not a vocabulary file (missing special tokens)")
        return cls(lines[4:])


def build_vocabulary(programs: Sequence[Program], max_size: int = 2000) -> Vocabulary:
    """Frequency-ranked vocabulary over code and summary tokens.

    Keeps the 4 specials plus the ``max_size - 4`` most frequent tokens;
    ties broken lexicographically. Everything else maps to UNK at encode
    time.
    """
    if not programs:
        raise EmptyCorpus("cannot build a vocabulary from zero programs")
    if max_size < 4:
        raise ConfigError("max_size must leave room for the 4 special tokens")
    counts: Counter[str] = Counter()
    for p in programs:
        counts.update(p.tokens)
        counts.update(p.summary)
    syntax = {
        t
        for t in counts
        if t in KEYWORDS or t in STRUCTURE_TOKENS or _is_operator_token(t)
    }
    if max_size - 4 < len(syntax):
        raise ConfigError(
            f"max_size {max_size} cannot hold the {len(syntax)} keyword/operator tokens"
        )
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [text for text, _ in ranked[: max_size - 4]]
    return Vocabulary(keep)


# ---------------------------------------------------------------------------
# JSONL corpus format: one object per line with "id", "code", "summary".
# ---------------------------------------------------------------------------

def load_jsonl(path: str | Path) -> list[Program]:
    programs: list[Program] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line_no) from exc
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", line_no)
            for key in ("id", "code", "summary"):
                if not isinstance(obj.get(key), str):
                    raise ParseError(f"missing or non-string field {key!r}", line_no)
            pid = obj["id"]
            if pid in seen:
                raise DuplicateId(f"duplicate program id {pid!r} at line {line_no}")
            seen.add(pid)
            try:
                tokens = tokenize(obj["code"])
            except MalformedSource as exc:
                raise ParseError(f"untokenizable code: {exc}", line_no) from exc
            programs.append(
                Program(id=pid, tokens=tokens, source=obj["code"], summary=obj["summary"].split())
            )
    return programs


def save_jsonl(programs: Sequence[Program], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in programs:
            record = {"id": p.id, "code": p.source, "summary": " ".join(p.summary)}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def corpus_digest(programs: Sequence[Program]) -> str:
    h = hashlib.sha256()
    for p in programs:
        h.update(p.id.encode("utf-8"))
        h.update(b"\x00")
        h.update(p.source.encode("utf-8"))
        h.update(b"\x00")
        h.update(" ".join(p.summary).encode("utf-8"))
        h.update(b"\x01")
    return h.hexdigest()


def split_corpus(
    programs: Sequence[Program], seed: int, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
) -> CorpusSplit:
    """Seeded 80/10/10 split; identical inputs reproduce identical splits."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError("split ratios must sum to 1")
    order = rng_for(seed, "split").permutation(len(programs))
    shuffled = [programs[i] for i in order]
    n = len(shuffled)
    n_train = int(ratios[0] * n)
    n_valid = int(ratios[1] * n)
    return CorpusSplit(
        train=shuffled[:n_train],
        valid=shuffled[n_train : n_train + n_valid],
        test=shuffled[n_train + n_valid :],
        seed=seed,
    )


def save_split(split: CorpusSplit, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_jsonl(split.train, directory / "train.jsonl")
    save_jsonl(split.valid, directory / "valid.jsonl")
    save_jsonl(split.test, directory / "test.jsonl")


def load_split(directory: str | Path, seed: int = 0) -> CorpusSplit:
    directory = Path(directory)
    return CorpusSplit(
        train=load_jsonl(directory / "train.jsonl"),
        valid=load_jsonl(directory / "valid.jsonl"),
        test=load_jsonl(directory / "test.jsonl"),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Deterministic toy corpus generator.
#
# Every program is a small executable function built from one of the
# templates below. The summary is a fixed phrase per template, so the
# summarization task is decided by code structure, never by the particular
# identifier names, which vary freely across programs.
# ---------------------------------------------------------------------------

WORD_POOL = (
    "acorn alder amber anchor apron arrow aspen badge basil beacon birch bloom "
    "bluff bonnet breeze briar brook burrow cairn canyon cedar cinder clover comet "
    "coral cove crag creek crest daisy delta drift dune ember fable falcon fennel "
    "fern fjord flint frost gale garnet ginger glade glen grove gully harbor hazel "
    "heath heron holly inlet ivory jasper juniper kelp knoll lagoon larch laurel "
    "lichen lilac linden lotus maple marsh meadow mesa mica mirth moss myrtle nectar "
    "nook oasis ochre onyx opal orchid osprey otter pebble perch pine plume pond "
    "poppy prairie quartz quill raven reed ridge rill robin rowan rune rush saffron "
    "sage sedge shale shore sorrel spruce summit tarn thicket thistle tide timber "
    "topaz trellis tundra umber vale walnut willow wren yarrow zephyr"
).split()

_FUNC_NAMES = ("calc", "proc", "build_value", "measure", "resolve", "reduce_input")

_TEMPLATES: dict[str, dict] = {}


def _template(name):
    def register(fn):
        _TEMPLATES[name] = {"build": fn}
        return fn

    return register


def _pick_names(rng, count: int) -> list[str]:
    idx = rng.choice(len(WORD_POOL), size=count, replace=False)
    return [WORD_POOL[i] for i in sorted(idx.tolist())]


# Each template returns (params, body_lines, summary); body_lines are
# (level, text) pairs relative to the function body.

@_template("total")
def _t_total(rng, names):
    xs, acc, item = names[:3]
    body = [
        (0, f"{acc} = 0"),
        (0, f"for {item} in {xs} :"),
        (1, f"{acc} += {item}"),
        (0, f"return {acc}"),
    ]
    return [xs], body, "add up every value in the list"


@_template("product")
def _t_product(rng, names):
    xs, acc, item = names[:3]
    body = [
        (0, f"{acc} = 1"),
        (0, f"for {item} in {xs} :"),
        (1, f"{acc} = {acc} * {item}"),
        (0, f"return {acc}"),
    ]
    return [xs], body, "multiply every value in the list"


@_template("count_matches")
def _t_count_matches(rng, names):
    xs, count, item = names[:3]
    target = int(rng.integers(0, 5))
    body = [
        (0, f"{count} = 0"),
        (0, f"for {item} in {xs} :"),
        (1, f"if {item} == {target} :"),
        (2, f"{count} += 1"),
        (0, f"return {count}"),
    ]
    return [xs], body, "count how many values equal the target"


@_template("largest")
def _t_largest(rng, names):
    xs, best, item = names[:3]
    body = [
        (0, f"{best} = {xs} [ 0 ]"),
        (0, f"for {item} in {xs} :"),
        (1, f"if {item} > {best} :"),
        (2, f"{best} = {item}"),
        (0, f"return {best}"),
    ]
    return [xs], body, "find the largest value in the list"


@_template("smallest")
def _t_smallest(rng, names):
    xs, best, item = names[:3]
    body = [
        (0, f"{best} = {xs} [ 0 ]"),
        (0, f"for {item} in {xs} :"),
        (1, f"if {item} < {best} :"),
        (2, f"{best} = {item}"),
        (0, f"return {best}"),
    ]
    return [xs], body, "find the smallest value in the list"


@_template("even_total")
def _t_even_total(rng, names):
    xs, acc, item = names[:3]
    body = [
        (0, f"{acc} = 0"),
        (0, f"for {item} in {xs} :"),
        (1, f"if {item} % 2 == 0 :"),
        (2, f"{acc} += {item}"),
        (0, f"return {acc}"),
    ]
    return [xs], body, "add up the even values in the list"


@_template("affine")
def _t_affine(rng, names):
    a, r = names[:2]
    scale = int(rng.integers(2, 9))
    shift = int(rng.integers(1, 9))
    body = [
        (0, f"{r} = {a} * {scale}"),
        (0, f"{r} = {r} + {shift}"),
        (0, f"return {r}"),
    ]
    return [a], body, "scale the number and add an offset"


@_template("clip")
def _t_clip(rng, names):
    a, bound = names[:2]
    limit = int(rng.integers(3, 9))
    body = [
        (0, f"{bound} = {limit}"),
        (0, f"if {a} > {bound} :"),
        (1, f"{a} = {bound}"),
        (0, f"return {a}"),
    ]
    return [a], body, "limit the number to an upper bound"


@_template("flag_pick")
def _t_flag_pick(rng, names):
    a, b, flag, out = names[:4]
    literal = "True" if rng.integers(0, 2) == 0 else "False"
    body = [
        (0, f"{flag} = {literal}"),
        (0, f"if {flag} :"),
        (1, f"{out} = {a}"),
        (0, "else :"),
        (1, f"{out} = {b}"),
        (0, f"return {out}"),
    ]
    return [a, b], body, "pick one of two numbers with a flag"


@_template("repeat_add")
def _t_repeat_add(rng, names):
    acc, step = names[:2]
    times = int(rng.integers(2, 7))
    delta = int(rng.integers(1, 9))
    body = [
        (0, f"{acc} = 0"),
        (0, f"for {step} in range ( {times} ) :"),
        (1, f"{acc} += {delta}"),
        (0, f"return {acc}"),
    ]
    return [], body, "repeat a fixed increment several times"


def _list_inputs(rng) -> list[tuple]:
    return [
        (rng.integers(0, 10, size=int(rng.integers(3, 7))).tolist(),),
        (rng.integers(0, 10, size=int(rng.integers(3, 7))).tolist(),),
    ]


def _scalar_inputs(rng) -> list[tuple]:
    return [(int(rng.integers(0, 12)),), (int(rng.integers(0, 12)),)]


def _pair_inputs(rng) -> list[tuple]:
    return [
        (int(rng.integers(0, 12)), int(rng.integers(0, 12))),
        (int(rng.integers(0, 12)), int(rng.integers(0, 12))),
    ]


def _no_inputs(rng) -> list[tuple]:
    return [(), ()]


TEMPLATE_NAMES = tuple(sorted(_TEMPLATES))


def _render(func_name: str, params: list[str], body: list[tuple[int, str]]) -> str:
    lines = [f"def {func_name} ( {' , '.join(params)} ) :" if params else f"def {func_name} ( ) :"]
    for level, text in body:
        lines.append("    " * (level + 1) + text)
    return "\n".join(lines)


def generate_toy_corpus(n: int, seed: int) -> list[Program]:
    """Deterministic corpus of n small executable single-function programs.

    Bodies run 3-15 statements; each program's summary is a fixed phrase
    decided by its template. Padding statements (spare assignments and
    print calls) vary the surface form without touching behaviour.
    """
    programs: list[Program] = []
    for i in range(n):
        rng = rng_for(seed, "toygen", i)
        template = TEMPLATE_NAMES[int(rng.integers(0, len(TEMPLATE_NAMES)))]
        names = _pick_names(rng, 8)
        func_name = _FUNC_NAMES[int(rng.integers(0, len(_FUNC_NAMES)))]
        params, body, summary = _TEMPLATES[template]["build"](rng, names)

        pad_names = [w for w in _pick_names(rng, 4) if w not in names and w != func_name]
        pads: list[tuple[int, str]] = []
        n_pads = int(rng.integers(0, 4))
        for j in range(min(n_pads, len(pad_names))):
            kind = int(rng.integers(0, 3))
            if kind == 0:
                pads.append((0, f"{pad_names[j]} = {int(rng.integers(0, 20))}"))
            elif kind == 1:
                pads.append((0, f"{pad_names[j]} = {int(rng.integers(0, 10))}"))
                pads.append((0, f"{pad_names[j]} = {pad_names[j]} + {int(rng.integers(1, 5))}"))
            else:
                word = WORD_POOL[int(rng.integers(0, len(WORD_POOL)))]
                pads.append((0, f'print ( "{word}" )'))
        body = pads + body

        source = _render(func_name, params, body)
        programs.append(
            Program(
                id=f"toy-{i:05d}-{template}",
                tokens=tokenize(source),
                source=source,
                summary=summary.split(),
            )
        )
    return programs


def template_of(program: Program) -> str:
    """Template name recorded in a toy program id."""
    parts = program.id.split("-", 2)
    if len(parts) == 3 and parts[2] in _TEMPLATES:
        return parts[2]
    raise ConfigError(f"program {program.id!r} is not from the toy generator")


def fixture_inputs(program: Program) -> list[tuple]:
    """Deterministic call arguments for an executable toy program."""
    template = template_of(program)
    rng = rng_for("fixture-inputs", program.id)
    builder = {
        "total": _list_inputs,
        "product": _list_inputs,
        "count_matches": _list_inputs,
        "largest": _list_inputs,
        "smallest": _list_inputs,
        "even_total": _list_inputs,
        "affine": _scalar_inputs,
        "clip": _scalar_inputs,
        "flag_pick": _pair_inputs,
        "repeat_add": _no_inputs,
    }[template]
    return builder(rng)
