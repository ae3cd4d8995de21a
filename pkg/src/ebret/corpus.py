"""Data model for dialog sessions grounded in small knowledge bases.

Holds the session/turn/KB types, the bit-mask representation of a subset
retrieval result, a synthetic corpus generator with a controllable amount of
cross-entity value sharing, JSON Lines persistence, and the whitespace
tokenizer / vocabulary shared by every model in the package.
"""

from __future__ import annotations

import json
import random
import re
from collections import Counter
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Sequence

from .errors import ConfigError, DataError, DimensionError

# Reserved token ids. UNK is assigned at encode time to out-of-vocabulary words.
PAD, SEP, BOS, EOS, UNK = 0, 1, 2, 3, 4
RESERVED_WORDS = ("<pad>", "<sep>", "<bos>", "<eos>", "<unk>")

# Masks are stored as non-negative Python ints; 63 bits keeps them inside a
# signed 64-bit lane when vectorized. Exact enumeration is only ever done for
# much smaller KBs.
MAX_KB_SIZE = 63


# ---------------------------------------------------------------------------
# Subset masks


@dataclass(frozen=True)
class SubsetMask:
    """A subset of a width-N knowledge base, one bit per piece.

    Bit i corresponds to KB piece i. Equality is bitwise. The canonical
    ordering used to break ties anywhere in the package is lexicographic over
    the bit tuple (bit 0 first), exposed through :meth:`lex_key`.
    """

    bits: int
    width: int

    def __post_init__(self) -> None:
        if not 0 <= self.width <= MAX_KB_SIZE:
            raise DimensionError(f"mask width {self.width} outside [0, {MAX_KB_SIZE}]")
        if self.bits < 0 or self.bits >> self.width:
            raise DimensionError("mask has bits set beyond its width")

    @classmethod
    def empty(cls, width: int) -> "SubsetMask":
        return cls(0, width)

    @classmethod
    def full(cls, width: int) -> "SubsetMask":
        return cls((1 << width) - 1, width)

    @classmethod
    def from_indices(cls, indices: Iterable[int], width: int) -> "SubsetMask":
        bits = 0
        for i in indices:
            if not 0 <= i < width:
                raise DimensionError(f"piece index {i} outside width {width}")
            bits |= 1 << i
        return cls(bits, width)

    def bit(self, i: int) -> int:
        return (self.bits >> i) & 1

    def indices(self) -> list[int]:
        return [i for i in range(self.width) if (self.bits >> i) & 1]

    def popcount(self) -> int:
        return self.bits.bit_count()

    def as_tuple(self) -> tuple[int, ...]:
        return tuple((self.bits >> i) & 1 for i in range(self.width))

    def lex_key(self) -> int:
        """Integer whose natural order equals lexicographic order of bit tuples."""
        key = 0
        for i in range(self.width):
            key = (key << 1) | ((self.bits >> i) & 1)
        return key

    def covers(self, other: "SubsetMask") -> bool:
        """True when every piece selected in `other` is also selected here."""
        if self.width != other.width:
            raise DimensionError("mask widths differ")
        return (other.bits & ~self.bits) == 0


def all_masks(width: int) -> Iterator[SubsetMask]:
    """Yield every subset of a width-N KB in bit order (0 .. 2^N - 1)."""
    for bits in range(1 << width):
        yield SubsetMask(bits, width)


# ---------------------------------------------------------------------------
# Tokenization and vocabulary

_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+|[^\sA-Za-z0-9_]")


def tokenize(text: str) -> list[str]:
    """Split on whitespace, keeping punctuation marks as their own tokens."""
    return _TOKEN_RE.findall(text)


class Vocab:
    """String-to-id mapping with fixed reserved ids 0..4.

    Out-of-vocabulary words map to UNK at encode time. The on-disk format is
    plain text, one word per line, line number == id.
    """

    def __init__(self, words: Sequence[str]):
        words = tuple(words)
        if words[: len(RESERVED_WORDS)] != RESERVED_WORDS:
            raise DataError("vocabulary must start with the reserved words")
        if any(not w for w in words):
            raise DataError("empty string cannot be a vocabulary word")
        if len(set(words)) != len(words):
            raise DataError("duplicate word in vocabulary")
        self.words = words
        self._index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.words == other.words

    def id_of(self, word: str) -> int:
        return self._index.get(word, UNK)

    def encode_words(self, words: Iterable[str]) -> list[int]:
        return [self._index.get(w, UNK) for w in words]

    def encode_text(self, text: str) -> list[int]:
        return self.encode_words(tokenize(text))

    def decode_words(self, ids: Iterable[int], skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if skip_special and i <= UNK:
                continue
            out.append(self.words[i])
        return out

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for w in self.words:
                f.write(w + "\n")

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            words = [line.rstrip("\n") for line in f]
        while words and words[-1] == "":
            words.pop()
        return cls(words)


def build_vocab(corpus: Sequence["Session"]) -> Vocab:
    """Deterministic vocabulary: frequency-descending, then lexicographic.

    Counts every word in user/response texts and in KB entity/slot/value
    fields so knowledge pieces are always encodable.
    """
    counts: Counter[str] = Counter()
    for session in corpus:
        if session.kb is not None:
            for piece in session.kb.pieces:
                counts.update(tokenize(piece.entity))
                counts.update(tokenize(piece.slot))
                counts.update(tokenize(piece.value))
        for turn in session.turns:
            counts.update(tokenize(turn.user))
            counts.update(tokenize(turn.response))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(RESERVED_WORDS + tuple(w for w, _ in ranked))


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class KnowledgePiece:
    """One retrievable fact: an entity attribute as a slot-value pair."""

    piece_id: str
    entity: str
    slot: str
    value: str

    def text_tokens(self, vocab: Vocab) -> list[int]:
        """Canonical token serialization: entity SEP slot SEP value."""
        return (
            vocab.encode_text(self.entity)
            + [SEP]
            + vocab.encode_text(self.slot)
            + [SEP]
            + vocab.encode_text(self.value)
        )


@dataclass(frozen=True)
class KnowledgeBase:
    """Ordered list of knowledge pieces; the order is canonical and stable."""

    pieces: tuple[KnowledgePiece, ...]

    def __post_init__(self) -> None:
        if len(self.pieces) > MAX_KB_SIZE:
            raise DataError(f"KB has {len(self.pieces)} pieces, cap is {MAX_KB_SIZE}")
        ids = [p.piece_id for p in self.pieces]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate piece_id within a KB")

    def __len__(self) -> int:
        return len(self.pieces)

    def piece_ids(self) -> list[str]:
        return [p.piece_id for p in self.pieces]

    def mask_from_ids(self, ids: Iterable[str]) -> SubsetMask:
        index = {p.piece_id: i for i, p in enumerate(self.pieces)}
        try:
            return SubsetMask.from_indices((index[i] for i in ids), len(self.pieces))
        except KeyError as e:
            raise DataError(f"unknown piece id {e.args[0]!r}") from None

    def ids_from_mask(self, mask: SubsetMask) -> list[str]:
        if mask.width != len(self.pieces):
            raise DimensionError("mask width does not match KB size")
        return [self.pieces[i].piece_id for i in mask.indices()]


@dataclass(frozen=True)
class Turn:
    """One user utterance / system response pair.

    `gold` is the annotated subset of relevant KB pieces (absent on
    unlabeled data); `requested` holds the value strings the user asked for,
    used only by the session-success metric.
    """

    user: str
    response: str
    gold: SubsetMask | None = None
    requested: frozenset[str] = frozenset()


@dataclass(frozen=True)
class Session:
    """A dialog: a KB plus an ordered list of turns.

    The turn-t context is derived, never stored: it is the concatenation of
    all user and response texts of turns 0..t-1. Unlabeled sessions may lack
    a KB entirely (kb is None).
    """

    session_id: str
    kb: KnowledgeBase | None
    turns: tuple[Turn, ...]
    labeled: bool

    def __post_init__(self) -> None:
        if self.labeled:
            if self.kb is None:
                raise DataError(f"labeled session {self.session_id} has no KB")
            for t, turn in enumerate(self.turns):
                if turn.gold is None:
                    raise DataError(
                        f"labeled session {self.session_id} turn {t} has no gold subset"
                    )
        n = None if self.kb is None else len(self.kb)
        for t, turn in enumerate(self.turns):
            if turn.gold is not None and turn.gold.width != n:
                raise DimensionError(
                    f"session {self.session_id} turn {t}: gold width "
                    f"{turn.gold.width} != KB size {n}"
                )


def strip_labels(
    corpus: Sequence[Session], *, keep_kb: bool = True
) -> list[Session]:
    """Return an unlabeled copy of `corpus` (gold and requested dropped).

    With keep_kb=False the KB is removed as well, producing the minimal
    unlabeled schema.
    """
    out = []
    for s in corpus:
        turns = tuple(Turn(t.user, t.response) for t in s.turns)
        out.append(
            Session(s.session_id, s.kb if keep_kb else None, turns, labeled=False)
        )
    return out


# ---------------------------------------------------------------------------
# Synthetic corpus generation

_SLOT_NAMES = (
    "price", "color", "size", "brand", "rating", "speed",
    "weight", "origin", "stock", "style", "power", "range",
)
_GROUP_NAMES = ("basics", "details", "specs", "extras", "facts", "traits")


@dataclass(frozen=True)
class SyntheticConfig:
    num_sessions: int
    entities: int
    slots: int
    turns_per_session: int
    vocab_size: int = 24
    correlation_strength: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.num_sessions < 1 or self.turns_per_session < 1:
            raise ConfigError("num_sessions and turns_per_session must be >= 1")
        if self.entities < 1 or self.slots < 1:
            raise ConfigError("entities and slots must be >= 1")
        if self.entities * self.slots > MAX_KB_SIZE:
            raise ConfigError(
                f"entities*slots = {self.entities * self.slots} exceeds {MAX_KB_SIZE}"
            )
        if self.vocab_size < 16:
            raise ConfigError("vocab_size must be >= 16")
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise ConfigError("correlation_strength must lie in [0, 1]")


def _slot_name(k: int) -> str:
    return _SLOT_NAMES[k] if k < len(_SLOT_NAMES) else f"slot{k}"


def _group_name(g: int) -> str:
    return _GROUP_NAMES[g] if g < len(_GROUP_NAMES) else f"group{g}"


def generate_synthetic(config: SyntheticConfig) -> list[Session]:
    """Generate a labeled corpus of sessions over one shared KB.

    Every turn's gold subset comes from a latent topic: one entity plus one
    group of slots that always co-occur. With probability
    `correlation_strength` an entity's value for a slot is the slot's shared
    string rather than an entity-private one, so user queries that mention a
    value can be ambiguous about the entity. Per-piece independence is then a
    lossy model of the gold distribution while subsets stay entity-coherent.
    Fully deterministic given the seed.
    """
    config.validate()
    rng = random.Random(config.seed)
    ne, ns = config.entities, config.slots

    entities = [f"ent{j}" for j in range(ne)]
    slots = [_slot_name(k) for k in range(ns)]
    groups = [list(range(k, min(k + 2, ns))) for k in range(0, ns, 2)]
    fillers = [f"w{i}" for i in range(config.vocab_size)]

    value = {}
    for k in range(ns):
        shared = f"v{k}c"
        for j in range(ne):
            if rng.random() < config.correlation_strength:
                value[j, k] = shared
            else:
                value[j, k] = f"v{k}e{j}"

    pieces = tuple(
        KnowledgePiece(f"e{j}s{k}", entities[j], slots[k], value[j, k])
        for j in range(ne)
        for k in range(ns)
    )
    kb = KnowledgeBase(pieces)
    n = len(pieces)

    def filler_words() -> list[str]:
        return [rng.choice(fillers) for _ in range(rng.randint(0, 2))]

    sessions = []
    for s in range(config.num_sessions):
        # One session rarely revisits an entity: topics cycle through a fresh
        # permutation, so the current entity is absent from the context.
        topic_order = rng.sample(range(ne), ne)
        topic_pos = 0
        turns = []
        for _ in range(config.turns_per_session):
            kind = rng.random()
            if kind < 0.15:
                user = " ".join(["hello"] + filler_words())
                turns.append(
                    Turn(user, "hi there", gold=SubsetMask.empty(n))
                )
                continue
            j = topic_order[topic_pos % ne]
            topic_pos += 1
            g = rng.randrange(len(groups))
            group = groups[g]
            if kind < 0.45:
                user_words = ["tell", "me", _group_name(g), "of", entities[j]]
            else:
                k_query = group[rng.randrange(len(group))]
                user_words = ["which", "one", "has", value[j, k_query],
                              "show", _group_name(g)]
            user_words += filler_words()
            # each value is preceded by its own slot name so an order-1
            # generator can place the right value after the right slot
            resp_words = ["the", entities[j]]
            for k in group:
                resp_words += [slots[k], value[j, k]]
            gold = SubsetMask.from_indices((j * ns + k for k in group), n)
            requested = frozenset(value[j, k] for k in group)
            turns.append(
                Turn(" ".join(user_words), " ".join(resp_words), gold, requested)
            )
        sessions.append(Session(f"syn{s:04d}", kb, tuple(turns), labeled=True))
    return sessions


# ---------------------------------------------------------------------------
# JSON Lines persistence


def save_jsonl(corpus: Sequence[Session], path: str) -> None:
    """Write one session per line; see load_jsonl for the schema."""
    with open(path, "w", encoding="utf-8") as f:
        for s in corpus:
            d: dict = {"session_id": s.session_id, "labeled": s.labeled}
            if s.kb is not None:
                d["kb"] = [
                    {"id": p.piece_id, "entity": p.entity, "slot": p.slot,
                     "value": p.value}
                    for p in s.kb.pieces
                ]
            d["turns"] = []
            for t in s.turns:
                td: dict = {"user": t.user, "response": t.response}
                if t.gold is not None:
                    td["gold"] = s.kb.ids_from_mask(t.gold)
                if t.requested:
                    td["requested"] = sorted(t.requested)
                d["turns"].append(td)
            f.write(json.dumps(d, sort_keys=True) + "\n")


def _field(obj: dict, key: str, lineno: int, kind: type | None = None):
    if key not in obj:
        raise DataError(f"line {lineno}: missing field {key!r}")
    v = obj[key]
    if kind is not None and not isinstance(v, kind):
        raise DataError(f"line {lineno}: field {key!r} has wrong type")
    return v


def load_jsonl(path: str) -> list[Session]:
    """Load a corpus; save_jsonl(load_jsonl(p)) reproduces p field-for-field.

    Unlabeled sessions may omit the "kb" key entirely; they load with kb=None.
    Malformed lines raise DataError naming the line number and field.
    """
    sessions = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: invalid JSON ({e.msg})") from None
            sid = _field(obj, "session_id", lineno, str)
            labeled = _field(obj, "labeled", lineno, bool)
            kb = None
            if "kb" in obj:
                kb_rows = _field(obj, "kb", lineno, list)
                pieces = tuple(
                    KnowledgePiece(
                        _field(row, "id", lineno, str),
                        _field(row, "entity", lineno, str),
                        _field(row, "slot", lineno, str),
                        _field(row, "value", lineno, str),
                    )
                    for row in kb_rows
                )
                kb = KnowledgeBase(pieces)
            turns = []
            for td in _field(obj, "turns", lineno, list):
                user = _field(td, "user", lineno, str)
                response = _field(td, "response", lineno, str)
                gold = None
                if "gold" in td:
                    if kb is None:
                        raise DataError(f"line {lineno}: field 'gold' without 'kb'")
                    gold = kb.mask_from_ids(_field(td, "gold", lineno, list))
                requested = frozenset(td.get("requested", []))
                turns.append(Turn(user, response, gold, requested))
            try:
                sessions.append(Session(sid, kb, tuple(turns), labeled))
            except DataError as e:
                raise DataError(f"line {lineno}: {e}") from None
    return sessions


# ---------------------------------------------------------------------------
# Encoded per-turn views (the tokenized contract all models consume)


@dataclass(frozen=True)
class TurnView:
    """One turn of one session, tokenized against a fixed vocabulary.

    `context` is the concatenation of all previous user/response word tokens;
    `response` is word tokens plus a trailing EOS; `piece_tokens` holds each
    KB piece's canonical serialization.
    """

    session_id: str
    turn_index: int
    context: tuple[int, ...]
    user: tuple[int, ...]
    response: tuple[int, ...]
    piece_tokens: tuple[tuple[int, ...], ...]
    gold: SubsetMask | None
    requested: frozenset[str]
    kb_available: bool

    @property
    def n_pieces(self) -> int:
        return len(self.piece_tokens)


def encode_session(session: Session, vocab: Vocab) -> list[TurnView]:
    piece_tokens: tuple[tuple[int, ...], ...] = ()
    if session.kb is not None:
        piece_tokens = tuple(
            tuple(p.text_tokens(vocab)) for p in session.kb.pieces
        )
    views = []
    context: list[int] = []
    for t, turn in enumerate(session.turns):
        user = vocab.encode_text(turn.user)
        resp_words = vocab.encode_text(turn.response)
        views.append(
            TurnView(
                session_id=session.session_id,
                turn_index=t,
                context=tuple(context),
                user=tuple(user),
                response=tuple(resp_words) + (EOS,),
                piece_tokens=piece_tokens,
                gold=turn.gold,
                requested=turn.requested,
                kb_available=session.kb is not None,
            )
        )
        context += user + resp_words
    return views


def encode_corpus(corpus: Sequence[Session], vocab: Vocab) -> list[TurnView]:
    """Flat list of views over all sessions, in corpus order."""
    out: list[TurnView] = []
    for s in corpus:
        out.extend(encode_session(s, vocab))
    return out
