"""Synthetic grounded multiple-choice QA over small object scenes.

Each example is a scene of objects with structured attribute features
(one-hot blocks for color/shape/state plus noise dims), a question that
names one object by tag, four answer candidates, and four rationale
candidates. Questions ask for an attribute of either the tagged object
("direct") or its successor in scene order ("successor", the default).

Anti-leak construction: answer distractors are attribute values of the
*other* objects in the same scene, all from the questioned family, with
every scene's values pairwise distinct per family. Text alone cannot beat
chance (the candidate words are interchangeable without the features) and
the object features alone cannot either (the question picks which object
matters). Rationale distractors include a right-value/wrong-object lure
and a true-but-irrelevant pair, so rationale selection needs both text
matching and feature grounding.

Tag tokens do not use the word-embedding table: they embed as the
referenced object's projected feature vector, sharing the projection with
the object matrix.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, InputError, ParseError
from .tensor import RngState, Tensor

SCHEMA_VERSION = 1

FAMILY_VALUES: dict[str, list[str]] = {
    "color": ["red", "blue", "green", "yellow",
              "purple", "orange", "black", "white"],
    "shape": ["cube", "sphere", "cone", "cylinder",
              "torus", "prism", "disk", "wedge"],
    "state": ["new", "old", "wet", "dry", "hot", "cold", "clean", "dirty"],
}
FAMILIES = tuple(FAMILY_VALUES)
VALUES_PER_FAMILY = 8
ATTR_DIMS = len(FAMILIES) * VALUES_PER_FAMILY
MAX_OBJECTS = 8

PAD, SEP = "<pad>", "<sep>"
SPECIAL_WORDS = (PAD, SEP, "what", "of", "after", "is")
# the vocabulary layout below pins these two ids for every run
PAD_ID, SEP_ID = 0, 1


class Vocabulary:
    """Fixed bijective token/id mapping derived from the attribute schema.

    Layout: special words, family names, the family values in declaration
    order, then TAG_0..TAG_{max-1}. The layout is a pure function of the
    schema constants, so ids are stable across runs.
    """

    def __init__(self, max_tags: int = MAX_OBJECTS):
        if not 1 <= max_tags <= MAX_OBJECTS:
            raise ConfigError(f"max_tags {max_tags} outside 1..{MAX_OBJECTS}")
        tokens = list(SPECIAL_WORDS) + list(FAMILIES)
        for fam in FAMILIES:
            tokens += FAMILY_VALUES[fam]
        self._tag_base = len(tokens)
        tokens += [f"TAG_{i}" for i in range(max_tags)]
        self.max_tags = max_tags
        self._tokens = tokens
        self._ids = {t: i for i, t in enumerate(tokens)}

    @property
    def size(self) -> int:
        return len(self._tokens)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def sep_id(self) -> int:
        return self._ids[SEP]

    def id(self, token: str) -> int:
        if token not in self._ids:
            raise DataError(f"token {token!r} not in vocabulary")
        return self._ids[token]

    def token(self, tid: int) -> str:
        if not 0 <= tid < len(self._tokens):
            raise DataError(f"token id {tid} outside vocabulary of "
                            f"{len(self._tokens)}")
        return self._tokens[tid]

    def is_tag(self, tid: int) -> bool:
        return self._tag_base <= tid < len(self._tokens)

    def tag_id(self, index: int) -> int:
        if not 0 <= index < self.max_tags:
            raise DataError(f"tag index {index} outside 0..{self.max_tags - 1}")
        return self._tag_base + index

    def tag_index(self, tid: int) -> int:
        if not self.is_tag(tid):
            raise DataError(f"token id {tid} is not a tag token")
        return tid - self._tag_base

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.token(int(t)) for t in ids]


@dataclass
class SceneObject:
    features: np.ndarray
    tag: int


@dataclass
class SceneExample:
    id: str
    objects: list[SceneObject]
    query: list[int]
    answers: list[list[int]]
    answer_label: int
    rationales: list[list[int]]
    rationale_label: int


@dataclass
class GeneratorConfig:
    """Knobs for the synthetic corpus.

    ``question_kind``: "direct" asks about the tagged object itself;
    "successor" asks about the object after the tagged one in scene order
    (needs position/feature binding); "presence" asks which value of a
    family the scene's objects share ("what color is" a uniformly colored
    scene), with the three distractors drawn from the family's absent
    values — the evidence lives only in the object features, so a model
    whose text streams never see the scene is at chance by construction;
    "mixed" draws direct/presence with ``direct_fraction``.
    """
    n_examples: int = 1000
    n_objects_min: int = 4
    n_objects_max: int = 4
    d_obj: int = 32
    noise_scale: float = 0.1
    question_kind: str = "successor"
    direct_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_examples < 0:
            raise ConfigError(f"n_examples {self.n_examples} negative")
        if not 4 <= self.n_objects_min <= self.n_objects_max <= MAX_OBJECTS:
            raise ConfigError(
                f"object count range {self.n_objects_min}..{self.n_objects_max}"
                f" unusable: candidate construction needs 4..{MAX_OBJECTS} "
                f"objects per scene")
        if self.d_obj < ATTR_DIMS:
            raise ConfigError(f"d_obj {self.d_obj} below the {ATTR_DIMS} "
                              f"attribute dims")
        if self.question_kind not in ("successor", "direct", "presence",
                                      "mixed"):
            raise ConfigError(f"unknown question kind "
                              f"{self.question_kind!r}")
        if not 0.0 <= self.direct_fraction <= 1.0:
            raise ConfigError(f"direct_fraction {self.direct_fraction} "
                              f"outside [0, 1]")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "n_examples", "n_objects_min", "n_objects_max", "d_obj",
            "noise_scale", "question_kind", "direct_fraction", "seed")}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = {k: d[k] for k in cls().to_dict() if k in d}
        extra = set(d) - set(cls().to_dict())
        if extra:
            raise ConfigError(f"unknown generator config keys: "
                              f"{sorted(extra)}")
        return cls(**known)


def attribute_value(obj: SceneObject, family: str) -> str:
    """Decode one attribute family from the object's one-hot block."""
    fi = FAMILIES.index(family)
    block = obj.features[fi * VALUES_PER_FAMILY:(fi + 1) * VALUES_PER_FAMILY]
    return FAMILY_VALUES[family][int(np.argmax(block))]


def _make_features(value_ids: Sequence[int], d_obj: int, noise_scale: float,
                   rng: RngState) -> np.ndarray:
    f = np.zeros(d_obj, dtype=np.float64)
    for fi, vi in enumerate(value_ids):
        f[fi * VALUES_PER_FAMILY + vi] = 1.0
    if d_obj > ATTR_DIMS:
        f[ATTR_DIMS:] = rng.normal(noise_scale, (d_obj - ATTR_DIMS,)) \
            .astype(np.float64)
    return f


def _generate_one(config: GeneratorConfig, seed: int, index: int,
                  vocab: Vocabulary) -> SceneExample:
    rng = RngState.derive(seed, index)
    n_obj = int(rng.integers(config.n_objects_min, config.n_objects_max + 1))
    family = FAMILIES[int(rng.integers(0, len(FAMILIES)))]
    kind = config.question_kind
    if kind == "mixed":
        kind = "direct" if rng.uniform(0.0, 1.0) < config.direct_fraction \
            else "presence"

    # pairwise-distinct values per family make every decoded attribute
    # unambiguous within the scene; a presence scene instead shares one
    # value of the asked family across all its objects, so the answer is
    # a property of the scene as a whole
    per_family = [rng.permutation(VALUES_PER_FAMILY)[:n_obj]
                  for _ in FAMILIES]
    if kind == "presence":
        fi = FAMILIES.index(family)
        per_family[fi] = np.full(
            n_obj, int(rng.integers(0, VALUES_PER_FAMILY)), dtype=np.intp)
    objects = [SceneObject(
        features=_make_features([int(per_family[fi][oi])
                                 for fi in range(len(FAMILIES))],
                                config.d_obj, config.noise_scale, rng),
        tag=oi) for oi in range(n_obj)]

    k = int(rng.integers(0, n_obj))
    if kind == "presence":
        # no tag names a referent: the gold answer is the one candidate
        # value the scene's objects actually carry, the distractors are
        # values absent from the scene, so the question is unanswerable
        # without reading the object features
        target = k
        query = vocab.encode(["what", family, "is"])
    else:
        target = k if kind == "direct" else (k + 1) % n_obj
        relation = "of" if kind == "direct" else "after"
        query = vocab.encode(["what", family, relation]) + [vocab.tag_id(k)]

    gold_value = attribute_value(objects[target], family)
    others = [i for i in range(n_obj) if i != target]
    picks = [others[int(i)] for i in rng.permutation(len(others))[:3]]
    if kind == "presence":
        in_scene = {attribute_value(o, family) for o in objects}
        absent = [v for v in FAMILY_VALUES[family] if v not in in_scene]
        distractors = [absent[int(i)]
                       for i in rng.permutation(len(absent))[:3]]
    else:
        distractors = [attribute_value(objects[i], family) for i in picks]
    answer_values = [gold_value] + distractors
    slots = rng.permutation(4)
    answers: list[list[int]] = [[] for _ in range(4)]
    for v, s in zip(answer_values, slots):
        answers[int(s)] = [vocab.id(v)]
    answer_label = int(slots[0])

    # rationales: gold names (target, gold_value). Direct/successor lures
    # are wrong-value, wrong-object-same-value, and a true-but-irrelevant
    # pair; presence lures all claim absent values (every in-scene pairing
    # with the asked family would be true)
    is_id = vocab.id("is")
    if kind == "presence":
        rat_specs = [
            (target, gold_value),
            (target, distractors[0]),
            (picks[1], distractors[1]),
            (picks[2], distractors[2]),
        ]
    else:
        rat_specs = [
            (target, gold_value),
            (target, distractors[0]),
            (picks[1], gold_value),
            (picks[2], attribute_value(objects[picks[2]], family)),
        ]
    slots = rng.permutation(4)
    rationales: list[list[int]] = [[] for _ in range(4)]
    for (obj_i, val), s in zip(rat_specs, slots):
        rationales[int(s)] = [vocab.tag_id(obj_i), is_id, vocab.id(val)]
    rationale_label = int(slots[0])

    return SceneExample(
        id=f"ex{index:06d}",
        objects=objects,
        query=query,
        answers=answers,
        answer_label=answer_label,
        rationales=rationales,
        rationale_label=rationale_label,
    )


def generate_dataset(config: GeneratorConfig,
                     seed: int | None = None) -> list[SceneExample]:
    """Pure function of (config, seed): same inputs, same corpus."""
    seed = config.seed if seed is None else seed
    vocab = Vocabulary()
    examples = [_generate_one(config, seed, i, vocab)
                for i in range(config.n_examples)]
    for ex in examples:
        validate_example(ex, config.d_obj, vocab)
    return examples


def validate_example(ex: SceneExample, d_obj: int,
                     vocab: Vocabulary) -> None:
    if len(ex.objects) < 2:
        raise DataError(f"{ex.id}: fewer than 2 objects")
    for o in ex.objects:
        if o.features.shape != (d_obj,):
            raise DataError(f"{ex.id}: object feature width "
                            f"{o.features.shape} expected ({d_obj},)")
        if not np.all(np.isfinite(o.features)):
            raise DataError(f"{ex.id}: non-finite object features")
    tags = {o.tag for o in ex.objects}
    if len(tags) != len(ex.objects):
        raise DataError(f"{ex.id}: duplicate object tags")
    if len(ex.answers) != 4 or len(ex.rationales) != 4:
        raise DataError(f"{ex.id}: needs exactly 4 answers and 4 rationales")
    if not 0 <= ex.answer_label < 4 or not 0 <= ex.rationale_label < 4:
        raise DataError(f"{ex.id}: label out of range")
    for seq in [ex.query] + ex.answers + ex.rationales:
        if not seq:
            raise DataError(f"{ex.id}: empty token sequence")
        for tid in seq:
            if not 0 <= tid < vocab.size:
                raise DataError(f"{ex.id}: token id {tid} outside vocabulary")
            if vocab.is_tag(tid) and vocab.tag_index(tid) not in tags:
                raise DataError(f"{ex.id}: tag {vocab.token(tid)} references "
                                f"a missing object")


def make_subtask_inputs(ex: SceneExample, subtask: str
                        ) -> tuple[list[int], list[list[int]], int]:
    """QA: question vs the 4 answers. QAR: question + separator + correct
    answer vs the 4 rationales."""
    if subtask == "qa":
        return list(ex.query), [list(a) for a in ex.answers], ex.answer_label
    if subtask == "qar":
        query = list(ex.query) + [SEP_ID] + list(ex.answers[ex.answer_label])
        return query, [list(r) for r in ex.rationales], ex.rationale_label
    raise InputError(f"subtask must be 'qa' or 'qar', got {subtask!r}")


def solve_example(ex: SceneExample, vocab: Vocabulary
                  ) -> tuple[int, int]:
    """Rule-based oracle: decode the question, read the features, pick
    both gold candidates. Scores 100% on sound data by construction."""
    family = None
    relation = None
    tagged = None
    for tid in ex.query:
        tok = vocab.token(tid)
        if tok in FAMILIES:
            family = tok
        elif tok in ("of", "after", "is"):
            relation = tok
        elif vocab.is_tag(tid):
            tagged = vocab.tag_index(tid)
    if family is None or relation is None:
        raise DataError(f"{ex.id}: query is not a well-formed question")
    if relation == "is":
        # presence question: exactly one candidate value occurs in the scene
        in_scene = {attribute_value(o, family) for o in ex.objects}
        hits = [vocab.token(a[0]) for a in ex.answers
                if vocab.token(a[0]) in in_scene]
        if len(hits) != 1:
            raise DataError(f"{ex.id}: expected exactly one candidate value "
                            f"present in the scene, found {len(hits)}")
        value = hits[0]
    else:
        if tagged is None:
            raise DataError(f"{ex.id}: query names no object")
        by_tag = {o.tag: i for i, o in enumerate(ex.objects)}
        k = by_tag[tagged]
        target = k if relation == "of" else (k + 1) % len(ex.objects)
        value = attribute_value(ex.objects[target], family)
    value_id = vocab.id(value)

    answer_idx = [i for i, a in enumerate(ex.answers) if a == [value_id]]
    if len(answer_idx) != 1:
        raise DataError(f"{ex.id}: expected exactly one answer candidate "
                        f"matching {value!r}, found {len(answer_idx)}")
    if relation == "is":
        # only the supporting rationale names the present value
        rat_idx = [i for i, r in enumerate(ex.rationales)
                   if r[-1] == value_id]
    else:
        want_rat = [vocab.tag_id(ex.objects[target].tag), vocab.id("is"),
                    value_id]
        rat_idx = [i for i, r in enumerate(ex.rationales) if r == want_rat]
    if len(rat_idx) != 1:
        raise DataError(f"{ex.id}: expected exactly one supporting "
                        f"rationale, found {len(rat_idx)}")
    return answer_idx[0], rat_idx[0]


@dataclass
class EmbeddedExample:
    query: Tensor
    responses: list[Tensor]
    objects: Tensor
    gold: int


def embed_sequence(token_ids: Sequence[int], object_rows: Tensor,
                   vocab: Vocabulary, embedding_table: Tensor,
                   example_id: str = "?") -> Tensor:
    """Word tokens gather embedding rows; tag tokens gather the referenced
    object's projected row. Combined with 0/1 column masks so a single
    expression covers both kinds."""
    n = len(token_ids)
    if n == 0:
        raise InputError(f"{example_id}: cannot embed an empty sequence")
    word_ids = np.zeros(n, dtype=np.intp)
    obj_ids = np.zeros(n, dtype=np.intp)
    word_mask = np.zeros((n, 1), dtype=T.default_dtype())
    for i, tid in enumerate(token_ids):
        tid = int(tid)
        if not 0 <= tid < vocab.size:
            raise DataError(f"{example_id}: unknown token id {tid}")
        if vocab.is_tag(tid):
            oi = vocab.tag_index(tid)
            if oi >= object_rows.shape[0]:
                raise DataError(f"{example_id}: tag {vocab.token(tid)} "
                                f"references a missing object")
            obj_ids[i] = oi
        else:
            word_ids[i] = tid
            word_mask[i, 0] = 1.0
    words = T.gather_rows(embedding_table, word_ids)
    objs = T.gather_rows(object_rows, obj_ids)
    wm = Tensor(word_mask)
    om = Tensor(1.0 - word_mask)
    return T.add(T.mul(words, wm), T.mul(objs, om))


def embed_example(ex: SceneExample, vocab: Vocabulary,
                  embedding_table: Tensor, object_w: Tensor,
                  object_b: Tensor, subtask: str = "qa") -> EmbeddedExample:
    """Embed one example's subtask view; the object projection is shared
    between the object matrix and every tag token."""
    feats = np.stack([o.features for o in ex.objects]) \
        .astype(T.default_dtype())
    object_rows = T.affine(Tensor(feats), object_w, object_b)
    query_ids, response_ids, gold = make_subtask_inputs(ex, subtask)
    query = embed_sequence(query_ids, object_rows, vocab, embedding_table,
                           ex.id)
    responses = [embed_sequence(r, object_rows, vocab, embedding_table, ex.id)
                 for r in response_ids]
    return EmbeddedExample(query=query, responses=responses,
                           objects=object_rows, gold=gold)


def _header(d_obj: int) -> dict:
    return {"schema": "coreason-dataset", "version": SCHEMA_VERSION,
            "d_obj": d_obj, "families": {f: FAMILY_VALUES[f]
                                         for f in FAMILIES}}


def save_dataset(examples: list[SceneExample], path: str,
                 d_obj: int | None = None) -> None:
    """One JSON record per line; floats keep full round-trip precision."""
    if d_obj is None:
        if not examples:
            raise InputError("saving an empty dataset needs an explicit "
                             "d_obj for the header")
        d_obj = examples[0].objects[0].features.shape[0]
    buf = io.StringIO()
    buf.write(json.dumps(_header(d_obj), sort_keys=True) + "\n")
    for ex in examples:
        rec = {
            "id": ex.id,
            "objects": [{"f": [float(v) for v in o.features], "tag": o.tag}
                        for o in ex.objects],
            "query": ex.query,
            "answers": ex.answers,
            "answer_label": ex.answer_label,
            "rationales": ex.rationales,
            "rationale_label": ex.rationale_label,
        }
        buf.write(json.dumps(rec, sort_keys=True) + "\n")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_dataset(path: str) -> tuple[list[SceneExample], dict]:
    """Parse, validate, and return (examples, header)."""
    vocab = Vocabulary()
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: missing dataset header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:1: bad header: {e}") from e
    if header.get("schema") != "coreason-dataset":
        raise ParseError(f"{path}:1: not a dataset file")
    if header.get("version") != SCHEMA_VERSION:
        raise ParseError(f"{path}:1: schema version "
                         f"{header.get('version')!r}, expected "
                         f"{SCHEMA_VERSION}")
    d_obj = int(header["d_obj"])
    examples: list[SceneExample] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}:{lineno}: bad record: {e}") from e
        try:
            ex = SceneExample(
                id=rec["id"],
                objects=[SceneObject(
                    features=np.asarray(o["f"], dtype=np.float64),
                    tag=int(o["tag"])) for o in rec["objects"]],
                query=[int(t) for t in rec["query"]],
                answers=[[int(t) for t in a] for a in rec["answers"]],
                answer_label=int(rec["answer_label"]),
                rationales=[[int(t) for t in r] for r in rec["rationales"]],
                rationale_label=int(rec["rationale_label"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"{path}:{lineno}: malformed record: {e}") from e
        validate_example(ex, d_obj, vocab)
        examples.append(ex)
    return examples, header
