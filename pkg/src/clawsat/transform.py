"""Obfuscation transformations: site discovery, replace/insert rewrites,
random view generation, and semantics checking on executable fixtures.

Replace transformations rename a bound identifier consistently across its
whole scope or rewrite a boolean literal to an equivalent comparison.
Insert transformations splice a new statement line at a statement boundary:
either ``print ( "<payload>" )`` or the dead assignment ``<payload> = 0``.
"""

from __future__ import annotations

import copy
import io
import signal
from contextlib import contextmanager, redirect_stdout
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

from .corpus import (
    DEDENT,
    INDENT,
    NEWLINE,
    STRUCTURE_TOKENS,
    Program,
    Vocabulary,
    detokenize,
    fixture_inputs,
    is_bindable_name,
    is_identifier_token,
    quote_word,
)
from .errors import ExecutionTimeout, IllegalPayload, MalformedSource, NoSites, StaleSite
from .seeding import rng_for


class SiteKind(str, Enum):
    REPLACE_LOCAL_VAR = "replace_local_var"
    REPLACE_PARAM = "replace_param"
    REPLACE_BOOL_LITERAL = "replace_bool_literal"
    INSERT_PRINT = "insert_print"
    INSERT_DEAD_CODE = "insert_dead_code"


_KIND_ORDER = {k: i for i, k in enumerate(SiteKind)}

REPLACE_KINDS = frozenset(
    {SiteKind.REPLACE_LOCAL_VAR, SiteKind.REPLACE_PARAM, SiteKind.REPLACE_BOOL_LITERAL}
)
INSERT_KINDS = frozenset({SiteKind.INSERT_PRINT, SiteKind.INSERT_DEAD_CODE})
_IDENT_REPLACE_KINDS = frozenset({SiteKind.REPLACE_LOCAL_VAR, SiteKind.REPLACE_PARAM})

# Boolean literals are rewritten to fixed, trivially-equivalent comparisons.
BOOL_EQUIV = {"True": ("(", "1", "==", "1", ")"), "False": ("(", "0", "==", "1", ")")}
BOOL_PAYLOAD = {orig: "".join(seq) for orig, seq in BOOL_EQUIV.items()}


@dataclass(frozen=True)
class Site:
    """One transformable location: all occurrences of a bound identifier,
    all occurrences of one boolean literal, or a single statement boundary."""

    kind: SiteKind
    positions: tuple[int, ...]
    original: str | None = None


@dataclass(frozen=True)
class Transformation:
    site: Site
    payload: str


@dataclass
class View:
    """A transformed variant of a base program."""

    base_id: str
    tokens: list[str]
    applied: list[Transformation]


def _statements(tokens: Sequence[str]) -> list[tuple[int, int, int, bool]]:
    """(start, end_exclusive, level, is_block_header) per statement."""
    stmts = []
    level = 0
    start: int | None = None
    for i, tok in enumerate(tokens):
        if tok in STRUCTURE_TOKENS:
            if start is not None:
                stmts.append((start, i, level, tokens[i - 1] == ":"))
                start = None
            if tok == INDENT:
                level += 1
            elif tok == DEDENT:
                level -= 1
        elif start is None:
            start = i
    if start is not None:
        stmts.append((start, len(tokens), level, tokens[-1] == ":"))
    return stmts


def _function_shape(tokens: Sequence[str]) -> tuple[str | None, list[str]]:
    """Function name and parameter list, if the program is a def."""
    if not tokens or tokens[0] != "def":
        return None, []
    name = tokens[1] if len(tokens) > 1 and is_bindable_name(tokens[1]) else None
    params: list[str] = []
    try:
        close = tokens.index(")")
    except ValueError:
        return name, []
    for tok in tokens[3:close]:
        if is_bindable_name(tok):
            params.append(tok)
    return name, params


_ASSIGN_OPS = {"=", "+=", "-=", "*=", "/=", "%="}


def identify_sites(p: Program) -> list[Site]:
    """Every legal site of every kind, ordered by (kind, first position).

    Replace sites group all occurrences of one bound identifier (or one
    boolean literal); insert sites mark the offset just past a non-header
    statement.
    """
    tokens = p.tokens
    func_name, params = _function_shape(tokens)
    stmts = _statements(tokens)

    bound: list[str] = []
    for start, end, _level, header in stmts:
        head = tokens[start:end]
        if len(head) >= 2 and head[0] == "for" and is_bindable_name(head[1]):
            name = head[1]
        elif len(head) >= 2 and is_bindable_name(head[0]) and head[1] in _ASSIGN_OPS:
            name = head[0]
        else:
            continue
        if name != func_name and name not in params and name not in bound:
            bound.append(name)

    def occurrences(name: str) -> tuple[int, ...]:
        return tuple(i for i, t in enumerate(tokens) if t == name and i != 1)

    sites: list[Site] = []
    for name in bound:
        sites.append(Site(SiteKind.REPLACE_LOCAL_VAR, occurrences(name), name))
    for name in params:
        sites.append(Site(SiteKind.REPLACE_PARAM, occurrences(name), name))
    for literal in ("True", "False"):
        pos = tuple(i for i, t in enumerate(tokens) if t == literal)
        if pos:
            sites.append(Site(SiteKind.REPLACE_BOOL_LITERAL, pos, literal))
    for start, end, _level, header in stmts:
        if header:
            continue
        sites.append(Site(SiteKind.INSERT_PRINT, (end,)))
        sites.append(Site(SiteKind.INSERT_DEAD_CODE, (end,)))

    sites = [s for s in sites if s.positions]
    sites.sort(key=lambda s: (_KIND_ORDER[s.kind], s.positions[0]))
    return sites


def sites_of(p: Program) -> list[Site]:
    """identify_sites with per-program caching."""
    if p.sites is None:
        p.sites = identify_sites(p)
    return p.sites


def insert_template(kind: SiteKind, payload: str) -> list[str]:
    if kind is SiteKind.INSERT_PRINT:
        return [NEWLINE, "print", "(", quote_word(payload), ")"]
    if kind is SiteKind.INSERT_DEAD_CODE:
        return [NEWLINE, payload, "=", "0"]
    raise ValueError(f"{kind} is not an insert kind")


# Offset of the optimizable payload token inside each insert template.
_TEMPLATE_SLOT = {SiteKind.INSERT_PRINT: 3, SiteKind.INSERT_DEAD_CODE: 1}


def payload_error(p: Program, site: Site, payload: str) -> str | None:
    """Reason the payload is illegal for this site, or None when legal."""
    if payload in Vocabulary.SPECIALS or payload in STRUCTURE_TOKENS:
        return f"payload {payload!r} is a reserved token"
    if site.kind is SiteKind.REPLACE_BOOL_LITERAL:
        expected = BOOL_PAYLOAD[site.original]
        if payload != expected:
            return f"boolean sites only accept the fixed rewrite {expected!r}"
        return None
    if payload == site.original:
        return None  # identity transformation is always legal
    if not is_identifier_token(payload):
        return f"payload {payload!r} is not an eligible identifier"
    if site.kind is not SiteKind.INSERT_PRINT:
        if payload != site.original and payload in set(p.tokens):
            return f"payload {payload!r} collides with an existing program token"
    return None


def apply_assignment(
    p: Program, items: Sequence[tuple[Site, str]]
) -> tuple[list[str], dict[Site, tuple[int, ...]]]:
    """Compose transformations at distinct sites in one pass.

    Positions refer to the base program; offsets introduced by splices are
    tracked internally. Returns the transformed tokens and, for every site
    with an optimizable token, its slot positions in the output stream.
    """
    edits: list[tuple[int, int, list[str], Site, int | None]] = []
    for site, payload in items:
        if site.kind in _IDENT_REPLACE_KINDS:
            # identity payloads still record slots (the attack scores them)
            for pos in site.positions:
                edits.append((pos, 0, [payload], site, 0))
        elif site.kind is SiteKind.REPLACE_BOOL_LITERAL:
            seq = list(BOOL_EQUIV[site.original])
            for pos in site.positions:
                edits.append((pos, 0, seq, site, None))
        else:
            seq = insert_template(site.kind, payload)
            edits.append((site.positions[0], 1, seq, site, _TEMPLATE_SLOT[site.kind]))
    edits.sort(key=lambda e: (e[0], e[1], _KIND_ORDER[e[3].kind]))

    tokens = p.tokens
    out: list[str] = []
    slots: dict[Site, list[int]] = {}
    cursor = 0
    for pos, is_insert, seq, site, slot_offset in edits:
        out.extend(tokens[cursor:pos])
        base = len(out)
        out.extend(seq)
        cursor = pos if is_insert else pos + 1
        if slot_offset is not None:
            slots.setdefault(site, []).append(base + slot_offset)
    out.extend(tokens[cursor:])
    return out, {s: tuple(v) for s, v in slots.items()}


def build_view(p: Program, items: Sequence[tuple[Site, str]]) -> View:
    tokens, _ = apply_assignment(p, items)
    applied = [
        Transformation(site, payload)
        for site, payload in items
        if not (site.kind in _IDENT_REPLACE_KINDS and payload == site.original)
    ]
    return View(base_id=p.id, tokens=tokens, applied=applied)


def identity_view(p: Program) -> View:
    """The untransformed pass-through view for site-less programs."""
    return View(base_id=p.id, tokens=list(p.tokens), applied=[])


def apply_transformation(p: Program, t: Transformation) -> View:
    if t.site not in sites_of(p):
        raise StaleSite(f"site {t.site} not found in program {p.id!r}")
    reason = payload_error(p, t.site, t.payload)
    if reason is not None:
        raise IllegalPayload(reason)
    return build_view(p, [(t.site, t.payload)])


def site_group(site: Site) -> str:
    return "replace" if site.kind in REPLACE_KINDS else "insert"


def filter_sites(sites: Sequence[Site], kinds: str) -> list[Site]:
    """Restrict to one transformation family: 'replace', 'insert', 'both'."""
    if kinds == "both":
        return list(sites)
    if kinds not in ("replace", "insert"):
        raise ValueError(f"unknown site-kind filter {kinds!r}")
    return [s for s in sites if site_group(s) == kinds]


def payload_pool(vocab: Vocabulary, p: Program, site: Site, used: set[str]) -> list[str]:
    """Legal payload words for a site, in vocabulary-id order."""
    words = [vocab.tokens[i] for i in vocab.identifier_candidate_ids()]
    if site.kind is SiteKind.INSERT_PRINT:
        return [w for w in words if w not in used]
    forbidden = set(p.tokens)
    return [w for w in words if w not in used and w not in forbidden]


def random_view(p: Program, vocab: Vocabulary, k: int, rng, kinds: str = "both") -> View:
    """Uniform random view: min(k, #sites) distinct sites, random payloads."""
    if k < 1:
        raise ValueError("k must be >= 1")
    sites = filter_sites(sites_of(p), kinds)
    if not sites:
        raise NoSites(f"program {p.id!r} has no transformable sites")
    m = min(k, len(sites))
    chosen = sorted(rng.choice(len(sites), size=m, replace=False).tolist())
    items: list[tuple[Site, str]] = []
    used: set[str] = set()
    for idx in chosen:
        site = sites[idx]
        if site.kind is SiteKind.REPLACE_BOOL_LITERAL:
            items.append((site, BOOL_PAYLOAD[site.original]))
            continue
        pool = payload_pool(vocab, p, site, used)
        if not pool:
            raise IllegalPayload(f"no legal payloads left for site {site}")
        payload = pool[int(rng.integers(0, len(pool)))]
        used.add(payload)
        items.append((site, payload))
    return build_view(p, items)


def seeded_random_view(p: Program, vocab: Vocabulary, k: int, seed, kinds: str = "both") -> View:
    return random_view(p, vocab, k, rng_for(seed, "rand-view", p.id), kinds=kinds)


# ---------------------------------------------------------------------------
# Semantics checking on executable fixtures.
# ---------------------------------------------------------------------------

_SAFE_BUILTINS = {
    "print": print,
    "range": range,
    "len": len,
    "abs": abs,
    "min": min,
    "max": max,
}


@contextmanager
def _time_limit(seconds: float):
    # signal-based: fixture execution is serialized on the main thread.
    def on_alarm(signum, frame):
        raise ExecutionTimeout(f"fixture run exceeded {seconds:.1f}s")

    previous = signal.signal(signal.SIGALRM, on_alarm)
    signal.setitimer(signal.ITIMER_REAL, seconds)
    try:
        yield
    finally:
        signal.setitimer(signal.ITIMER_REAL, 0.0)
        signal.signal(signal.SIGALRM, previous)


def run_fixture(tokens: Sequence[str], inputs: Sequence[tuple], timeout: float = 1.0):
    """Execute a tokenized function on each input; (return, stdout lines) pairs."""
    source = detokenize(tokens)
    namespace: dict = {"__builtins__": dict(_SAFE_BUILTINS)}
    exec(compile(source, "<fixture>", "exec"), namespace)
    if tokens[0] != "def":
        raise MalformedSource("fixture programs must define a function")
    fn = namespace[tokens[1]]
    results = []
    for args in inputs:
        buffer = io.StringIO()
        with redirect_stdout(buffer), _time_limit(timeout):
            value = fn(*copy.deepcopy(args))
        results.append((value, buffer.getvalue().splitlines()))
    return results


def _sentinel_tokens(p: Program, view: View) -> tuple[list[str], set[str]]:
    """Rebuild the view with inserted print payloads swapped for sentinels.

    Print content cannot influence behaviour, so the swap is semantics
    neutral; sentinel output lines are dropped before stream comparison.
    """
    sentinels: set[str] = set()
    items: list[tuple[Site, str]] = []
    for i, t in enumerate(view.applied):
        if t.site.kind is SiteKind.INSERT_PRINT:
            probe = f"__probe_{i}__"
            sentinels.add(probe)
            items.append((t.site, probe))
        else:
            items.append((t.site, t.payload))
    tokens, _ = apply_assignment(p, items)
    real_tokens, _ = apply_assignment(
        p, [(t.site, t.payload) for t in view.applied]
    )
    if real_tokens != view.tokens:
        # View was not assembled from its recorded recipe: compare verbatim.
        return list(view.tokens), set()
    return tokens, sentinels


def check_semantics(
    p: Program, view: View, inputs: Sequence[tuple] | None = None, timeout: float = 1.0
) -> bool:
    """True iff the view behaves exactly like the base program.

    Behaviour means identical return values and identical stdout streams
    (lines emitted by inserted prints excluded) on every fixture input.
    """
    if inputs is None:
        inputs = fixture_inputs(p)
    base = run_fixture(p.tokens, inputs, timeout=timeout)
    probe_tokens, sentinels = _sentinel_tokens(p, view)
    try:
        got = run_fixture(probe_tokens, inputs, timeout=timeout)
    except ExecutionTimeout:
        raise
    except Exception:
        return False
    for (base_ret, base_out), (view_ret, view_out) in zip(base, got):
        if base_ret != view_ret:
            return False
        if base_out != [line for line in view_out if line not in sentinels]:
            return False
    return True


def save_views_jsonl(pairs: Sequence[tuple[Program, View]], path) -> None:
    """Transformed corpus in the JSONL format plus an 'applied' field."""
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for program, view in pairs:
            record = {
                "id": program.id,
                "code": detokenize(view.tokens),
                "summary": " ".join(program.summary),
                "applied": [
                    {
                        "kind": t.site.kind.value,
                        "positions": list(t.site.positions),
                        "payload": t.payload,
                    }
                    for t in view.applied
                ],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_templates_reference(path: str | Path) -> None:
    """Document the fixed insert/bool templates next to exported corpora."""
    text = (
        "# Transformation templates\n\n"
        "Insert transformations splice one new line at a statement boundary:\n\n"
        '- insert_print:     print ( "<payload>" )\n'
        "- insert_dead_code: <payload> = 0\n\n"
        "Boolean literals are rewritten to fixed equivalent comparisons:\n\n"
        "- True  -> ( 1 == 1 )\n"
        "- False -> ( 0 == 1 )\n\n"
        "Rename payloads are identifier-shaped vocabulary tokens that do not\n"
        "collide with any token of the host program.\n"
    )
    Path(path).write_text(text, encoding="utf-8")
