"""Cross-view QA pairs from paired scene graphs.

Object- and relation-level questions are produced by diffing an image scene
graph against a video or 3D scene graph through the cross-view object links,
then rendering each diff item with a seeded choice from a small template bank.
A structural validator accepts an answer only when every content word is
either template vocabulary or appears in one of the two graphs.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "SGObject",
    "SGRelation",
    "SceneGraph",
    "PairedSceneGraph",
    "GraphDiff",
    "QAPair",
    "diff_graphs",
    "gen_object_qa",
    "gen_relation_qa",
    "generate_qas",
    "validate_qa",
    "emit_jsonl",
    "read_jsonl",
    "load_pair",
    "pair_from_dict",
    "pair_to_dict",
    "random_pair",
    "baby_toy_pair",
    "OBJECT_CATEGORIES",
    "RELATION_CATEGORIES",
    "CHANGE_CATEGORIES",
]

OBJECT_CATEGORIES = ("appearance", "disappearance", "motion", "state_change", "new_object")
RELATION_CATEGORIES = ("persistence", "emergence", "evolution")
CHANGE_CATEGORIES = ("appearance", "disappearance", "motion", "state_change", "new_object", "emergence", "evolution")
POSITION_WORDS = frozenset(
    "left right center middle front back top bottom near far foreground background above below".split()
)
DEFAULT_CAP = 8

_WORD = re.compile(r"[a-z0-9]+")


def _words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


# ---------------------------------------------------------------- graphs


@dataclass(frozen=True)
class SGObject:
    id: str
    label: str
    attributes: tuple[str, ...] = ()


@dataclass(frozen=True)
class SGRelation:
    subject: str
    predicate: str
    object: str
    frames: tuple[int, int] | None = None  # video only: first and last frame


@dataclass(frozen=True)
class SceneGraph:
    objects: tuple[SGObject, ...]
    relations: tuple[SGRelation, ...]
    view_tag: str = "image"

    def __post_init__(self):
        if self.view_tag not in ("image", "video", "3d"):
            raise DataError(f"view_tag must be image, video or 3d, got {self.view_tag!r}")
        ids = [o.id for o in self.objects]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate object ids in {self.view_tag} graph: {dup}")
        known = set(ids)
        for r in self.relations:
            for end in (r.subject, r.object):
                if end not in known:
                    raise DataError(f"relation {r.subject}-{r.predicate}-{r.object} references unknown id {end!r}")

    def obj(self, oid: str) -> SGObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise DataError(f"unknown object id {oid!r}")

    def vocabulary(self) -> set[str]:
        vocab: set[str] = set()
        for o in self.objects:
            vocab.update(_words(o.label))
            for a in o.attributes:
                vocab.update(_words(a))
        for r in self.relations:
            vocab.update(_words(r.predicate))
            if r.frames is not None:
                vocab.update(str(f) for f in r.frames)
        return vocab


@dataclass(frozen=True)
class PairedSceneGraph:
    image_sg: SceneGraph
    other_sg: SceneGraph
    links: dict  # image object id -> other object id
    pair_kind: str = "image_video"
    pair_id: str = ""

    def __post_init__(self):
        if self.pair_kind not in ("image_video", "image_3d"):
            raise DataError(f"pair_kind must be image_video or image_3d, got {self.pair_kind!r}")
        img = {o.id for o in self.image_sg.objects}
        oth = {o.id for o in self.other_sg.objects}
        for a, b in self.links.items():
            if a not in img:
                raise DataError(f"dangling link: image object id {a!r} does not exist")
            if b not in oth:
                raise DataError(f"dangling link: other object id {b!r} does not exist")
        if len(set(self.links.values())) != len(self.links):
            raise DataError("link map is not injective")

    @property
    def other_view(self) -> str:
        return "video" if self.pair_kind == "image_video" else "3D scene"


def _graph_from_dict(doc: dict, default_tag: str) -> SceneGraph:
    objects = tuple(
        SGObject(str(o["id"]), str(o["label"]), tuple(str(a) for a in o.get("attributes", ())))
        for o in doc.get("objects", ())
    )
    relations = []
    for r in doc.get("relations", ()):
        frames = r.get("frames")
        relations.append(
            SGRelation(str(r["subject"]), str(r["predicate"]), str(r["object"]),
                       tuple(int(f) for f in frames) if frames is not None else None)
        )
    return SceneGraph(objects, tuple(relations), doc.get("view_tag", default_tag))


def pair_from_dict(doc: dict) -> PairedSceneGraph:
    try:
        kind = doc.get("pair_kind", "image_video")
        return PairedSceneGraph(
            _graph_from_dict(doc["image_sg"], "image"),
            _graph_from_dict(doc["other_sg"], "video" if kind == "image_video" else "3d"),
            {str(k): str(v) for k, v in doc.get("links", {}).items()},
            kind,
            str(doc.get("pair_id", "")),
        )
    except KeyError as exc:
        raise DataError(f"scene-graph pair missing key {exc}") from None
    except (TypeError, AttributeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed scene-graph pair: {exc}") from None


def pair_to_dict(pair: PairedSceneGraph) -> dict:
    def g(sg: SceneGraph) -> dict:
        return {
            "view_tag": sg.view_tag,
            "objects": [{"id": o.id, "label": o.label, "attributes": list(o.attributes)} for o in sg.objects],
            "relations": [
                {"subject": r.subject, "predicate": r.predicate, "object": r.object,
                 **({"frames": list(r.frames)} if r.frames is not None else {})}
                for r in sg.relations
            ],
        }

    return {"pair_id": pair.pair_id, "pair_kind": pair.pair_kind, "image_sg": g(pair.image_sg),
            "other_sg": g(pair.other_sg), "links": dict(pair.links)}


def load_pair(path: str | Path) -> PairedSceneGraph:
    """Read one pair document; ``json.JSONDecodeError`` propagates with its location."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    pair = pair_from_dict(doc)
    if not pair.pair_id:
        pair = PairedSceneGraph(pair.image_sg, pair.other_sg, pair.links, pair.pair_kind, Path(path).stem)
    return pair


# ---------------------------------------------------------------- diff

Triple = tuple[str, str, str]


@dataclass(frozen=True)
class GraphDiff:
    unmatched_image_objects: tuple[str, ...]
    unmatched_other_objects: tuple[str, ...]
    persistent_relations: tuple[Triple, ...]  # in other-graph ids
    changed_relations: tuple[tuple[str, str, tuple[str, ...], tuple[str, ...]], ...]  # (s, o, old preds, new preds)
    new_relations: tuple[Triple, ...]
    vanished_relations: tuple[Triple, ...]  # image ids
    moved_objects: tuple[tuple[str, str, tuple[str, ...], tuple[str, ...]], ...]  # (img id, other id, old, new)
    state_changes: tuple[tuple[str, str, tuple[str, ...], tuple[str, ...]], ...]


def _split_attrs(attrs: Iterable[str]) -> tuple[set[str], set[str]]:
    pos = {a for a in attrs if a.lower() in POSITION_WORDS}
    return pos, set(attrs) - pos


def diff_graphs(pair: PairedSceneGraph) -> GraphDiff:
    links = pair.links
    img, oth = pair.image_sg, pair.other_sg
    linked_other = set(links.values())
    unmatched_img = tuple(o.id for o in img.objects if o.id not in links)
    unmatched_oth = tuple(o.id for o in oth.objects if o.id not in linked_other)

    translated: set[Triple] = set()
    untranslatable: set[Triple] = set()
    for r in img.relations:
        if r.subject in links and r.object in links:
            translated.add((links[r.subject], r.predicate, links[r.object]))
        else:
            untranslatable.add((r.subject, r.predicate, r.object))
    other_triples = {(r.subject, r.predicate, r.object) for r in oth.relations}

    def preds(triples):
        out: dict[tuple[str, str], set[str]] = {}
        for s, p, o in triples:
            out.setdefault((s, o), set()).add(p)
        return out

    img_preds, oth_preds = preds(translated), preds(other_triples)
    changed = []
    for key in sorted(set(img_preds) & set(oth_preds)):
        old, new = img_preds[key] - oth_preds[key], oth_preds[key] - img_preds[key]
        if old and new:
            changed.append((key[0], key[1], tuple(sorted(old)), tuple(sorted(new))))
    changed_keys = {(s, o) for s, o, _, _ in changed}
    persistent = sorted(translated & other_triples)
    new = sorted(t for t in other_triples - translated if (t[0], t[2]) not in changed_keys)
    back = {v: k for k, v in links.items()}
    vanished = sorted(
        [(back[s], p, back[o]) for s, p, o in translated - other_triples if (s, o) not in changed_keys]
        + list(untranslatable)
    )

    moved, states = [], []
    for a, b in sorted(links.items()):
        pa, sa = _split_attrs(img.obj(a).attributes)
        pb, sb = _split_attrs(oth.obj(b).attributes)
        if pa != pb and pa and pb:
            moved.append((a, b, tuple(sorted(pa - pb)), tuple(sorted(pb - pa))))
        if sa != sb and sa - sb and sb - sa:
            states.append((a, b, tuple(sorted(sa - sb)), tuple(sorted(sb - sa))))
    return GraphDiff(unmatched_img, unmatched_oth, tuple(persistent), tuple(changed), tuple(new),
                     tuple(vanished), tuple(moved), tuple(states))


# ---------------------------------------------------------------- templates

# (question, answer) surface forms per category; {view} is "video" or "3D scene".
TEMPLATES: dict[str, list[tuple[str, str]]] = {
    "new_object": [
        ("Does any new object appear in the {view} that is not in the image?",
         "Yes, {a_label} appears in the {view} but not in the image."),
        ("Is there an object in the {view} that was absent from the image?",
         "Yes, the {label} shows up only in the {view}."),
        ("Which object enters the scene in the {view} but is missing from the image?",
         "The {label} enters the scene in the {view}."),
    ],
    "appearance": [
        ("Does any object become visible in the {view} that the image does not show?",
         "Yes, the {label} is visible in the {view} but not in the image."),
        ("Which object can be seen in the {view} but not from the image viewpoint?",
         "The {label} appears only in the {view}."),
        ("Is there an object revealed by the {view} that is hidden in the image?",
         "Yes, {a_label} is revealed in the {view}."),
    ],
    "disappearance": [
        ("Is the {label} from the image still present in the {view}?",
         "No, the {label} no longer appears in the {view}."),
        ("Which object in the image is missing from the {view}?",
         "The {label} is missing from the {view}."),
        ("Does the {label} seen in the image also appear in the {view}?",
         "No, the {label} disappears in the {view}."),
    ],
    "motion": [
        ("How does the {label} in the image move in the {view}?",
         "The {label} moves from the {old} to the {new}."),
        ("Where is the {label} in the {view} compared to the image?",
         "The {label} is at the {new} in the {view}, while it was at the {old} in the image."),
        ("Does the {label} change position between the image and the {view}?",
         "Yes, the {label} shifts from the {old} to the {new}."),
    ],
    "state_change": [
        ("Does the state of the {label} change between the image and the {view}?",
         "Yes, the {label} changes from {old} to {new}."),
        ("How does the {label} look in the {view} compared to the image?",
         "The {label} is {new} in the {view}, while it was {old} in the image."),
        ("Is the {label} in the {view} the same as in the image?",
         "No, the {label} goes from {old} to {new}."),
    ],
    "persistence": [
        ("Is the relation between the {subj} and the {obj} the same in the {view} as in the image?",
         "Yes, both show the {subj} {pred} the {obj}."),
        ("Does the {subj} keep {pred} the {obj} in the {view}?",
         "Yes, the {subj} is still {pred} the {obj} in the {view}."),
        ("Is the {subj} still {pred} the {obj} in the {view}?",
         "Yes, the {subj} remains {pred} the {obj}."),
    ],
    "persistence_lost": [
        ("Is the relation between the {subj} and the {obj} the same in the {view} as in the image?",
         "No, the {subj} is {pred} the {obj} in the image but not in the {view}."),
        ("Does the {subj} keep {pred} the {obj} in the {view}?",
         "No, the {subj} is no longer {pred} the {obj} in the {view}."),
        ("Is the {subj} still {pred} the {obj} in the {view}?",
         "No, the {subj} stops {pred} the {obj}."),
    ],
    "evolution": [
        ("How does the relation between the {subj} and the {obj} change from the image to the {view}?",
         "It changes from {old} to {new}: the {subj} is {new} the {obj} in the {view}."),
        ("Does the interaction between the {subj} and the {obj} switch type in the {view}?",
         "Yes, the {subj} goes from {old} the {obj} to {new} it."),
        ("What happens to the {subj} {old} the {obj} in the {view}?",
         "The {subj} is {new} the {obj} instead of {old} it."),
    ],
    "emergence": [
        ("Does any new relation appear in the {view} that is not present in the image?",
         "Yes, the {subj} {pred} the {obj} appears only in the {view}{span}."),
        ("Which relation emerges in the {view} but is absent from the image?",
         "The {subj} {pred} the {obj} emerges in the {view}{span}."),
        ("Is there a new interaction in the {view} involving the {subj}?",
         "Yes, the {subj} is {pred} the {obj} in the {view}{span}."),
    ],
}

_SPAN_TEXT = " from frame {start} to frame {end}"

TEMPLATE_VOCAB = frozenset(
    w
    for forms in TEMPLATES.values()
    for q, a in forms
    for w in _words(re.sub(r"\{[a-z_]+\}", " ", q + " " + a))
) | frozenset(_words("video 3D scene a an " + re.sub(r"\{[a-z_]+\}", " ", _SPAN_TEXT)))


@dataclass
class QAPair:
    question: str
    answer: str
    level: str  # object | relation
    category: str
    provenance: list[str] = field(default_factory=list)  # "image:<id>" / "other:<id>"

    def to_dict(self) -> dict:
        return {"question": self.question, "answer": self.answer, "level": self.level,
                "category": self.category, "provenance": list(self.provenance)}


def _pick(seed: int, category: str, key: str) -> int:
    return zlib.crc32(f"{seed}|{category}|{key}".encode()) % len(TEMPLATES[category])


def _article(label: str) -> str:
    return ("an " if label[:1].lower() in "aeiou" else "a ") + label


def _render(category: str, seed: int, key: str, level: str, out_category: str, provenance, **slots) -> QAPair:
    q, a = TEMPLATES[category][_pick(seed, category, key)]
    if "label" in slots:
        slots["a_label"] = _article(slots["label"])
    slots.setdefault("span", "")
    return QAPair(q.format(**slots), a.format(**slots), level, out_category, list(provenance))


def gen_object_qa(pair: PairedSceneGraph, seed: int, diff: GraphDiff | None = None) -> list[QAPair]:
    d = diff or diff_graphs(pair)
    img, oth, view = pair.image_sg, pair.other_sg, pair.other_view
    out = []
    for oid in d.unmatched_image_objects:
        out.append(_render("disappearance", seed, f"i{oid}", "object", "disappearance", [f"image:{oid}"],
                           label=img.obj(oid).label, view=view))
    gained = "new_object" if pair.pair_kind == "image_video" else "appearance"
    for oid in d.unmatched_other_objects:
        out.append(_render(gained, seed, f"o{oid}", "object", gained, [f"other:{oid}"],
                           label=oth.obj(oid).label, view=view))
    for a, b, old, new in d.moved_objects:
        out.append(_render("motion", seed, f"m{a}", "object", "motion", [f"image:{a}", f"other:{b}"],
                           label=img.obj(a).label, view=view, old=" ".join(old) or "same place",
                           new=" ".join(new)))
    for a, b, old, new in d.state_changes:
        out.append(_render("state_change", seed, f"s{a}", "object", "state_change", [f"image:{a}", f"other:{b}"],
                           label=img.obj(a).label, view=view, old=" and ".join(old), new=" and ".join(new)))
    return out


def gen_relation_qa(pair: PairedSceneGraph, seed: int, diff: GraphDiff | None = None) -> list[QAPair]:
    d = diff or diff_graphs(pair)
    oth, img, view = pair.other_sg, pair.image_sg, pair.other_view
    spans = {(r.subject, r.predicate, r.object): r.frames for r in oth.relations}
    out = []
    for s, p, o in d.persistent_relations:
        out.append(_render("persistence", seed, f"p{s}|{p}|{o}", "relation", "persistence",
                           [f"other:{s}", f"other:{o}"], subj=oth.obj(s).label, pred=p, obj=oth.obj(o).label,
                           view=view))
    for s, p, o in d.vanished_relations:
        out.append(_render("persistence_lost", seed, f"v{s}|{p}|{o}", "relation", "persistence",
                           [f"image:{s}", f"image:{o}"], subj=img.obj(s).label, pred=p, obj=img.obj(o).label,
                           view=view))
    for s, o, old, new in d.changed_relations:
        out.append(_render("evolution", seed, f"c{s}|{o}", "relation", "evolution", [f"other:{s}", f"other:{o}"],
                           subj=oth.obj(s).label, obj=oth.obj(o).label, old=" and ".join(old),
                           new=" and ".join(new), view=view))
    for s, p, o in d.new_relations:
        fr = spans.get((s, p, o))
        span = _SPAN_TEXT.format(start=fr[0], end=fr[1]) if fr else ""
        out.append(_render("emergence", seed, f"n{s}|{p}|{o}", "relation", "emergence", [f"other:{s}", f"other:{o}"],
                           subj=oth.obj(s).label, pred=p, obj=oth.obj(o).label, view=view, span=span))
    return out


def generate_qas(pair: PairedSceneGraph, seed: int, cap: int | None = DEFAULT_CAP) -> list[QAPair]:
    """Object then relation QAs for one pair, change categories first, truncated to ``cap``."""
    d = diff_graphs(pair)
    qas = gen_object_qa(pair, seed, d) + gen_relation_qa(pair, seed, d)
    qas.sort(key=lambda qa: qa.category not in CHANGE_CATEGORIES)  # stable
    return qas if cap is None else qas[:cap]


def validate_qa(pair: PairedSceneGraph, qa: QAPair) -> tuple[bool, str]:
    """Accept when every answer word is template vocabulary or grounded in a graph."""
    if qa.level not in ("object", "relation"):
        return False, f"unknown level {qa.level!r}"
    allowed = OBJECT_CATEGORIES if qa.level == "object" else RELATION_CATEGORIES
    if qa.category not in allowed:
        return False, f"category {qa.category!r} invalid for level {qa.level!r}"
    ids = {"image": {o.id for o in pair.image_sg.objects}, "other": {o.id for o in pair.other_sg.objects}}
    for ref in qa.provenance:
        side, _, oid = ref.partition(":")
        if oid not in ids.get(side, ()):
            return False, f"unknown provenance id {ref!r}"
    grounded = pair.image_sg.vocabulary() | pair.other_sg.vocabulary()
    for w in _words(qa.answer):
        if w not in TEMPLATE_VOCAB and w not in grounded:
            return False, f"ungrounded label: {w}"
    return True, "ok"


# ---------------------------------------------------------------- io


def emit_jsonl(pairs: Sequence[QAPair], path: str | Path) -> int:
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            for qa in pairs:
                fh.write(json.dumps(qa.to_dict(), ensure_ascii=False) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write {p}: {exc.strerror}") from None
    return len(pairs)


def read_jsonl(path: str | Path) -> list[QAPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(QAPair(d["question"], d["answer"], d["level"], d["category"], list(d["provenance"])))
    return out


# ---------------------------------------------------------------- synthetic graphs

_LABELS = ("baby", "toy", "sofa", "ball", "man", "woman", "child", "dog", "table", "chair", "cup", "door",
           "lamp", "bottle", "book", "window")
_PREDICATES = ("pushing", "holding", "sitting on", "in front of", "next to", "looking at", "touching", "behind")
_STATES = ("open", "closed", "red", "blue", "empty", "full", "standing", "lying")
_POSITIONS = ("left", "right", "center", "front", "back")


def random_pair(rng: np.random.Generator, max_objects: int = 10, pair_id: str = "") -> PairedSceneGraph:
    """A random image/other graph pair with partial links and perturbed relations."""
    n_img = int(rng.integers(1, max_objects + 1))
    n_oth = int(rng.integers(1, max_objects + 1))

    def objects(prefix, n):
        objs = []
        for i in range(n):
            attrs = [str(rng.choice(_POSITIONS))]
            if rng.random() < 0.5:
                attrs.append(str(rng.choice(_STATES)))
            objs.append(SGObject(f"{prefix}{i}", str(rng.choice(_LABELS)), tuple(attrs)))
        return objs

    img_objs, oth_objs = objects("i", n_img), objects("v", n_oth)
    n_links = int(rng.integers(0, min(n_img, n_oth) + 1))
    a = rng.permutation(n_img)[:n_links]
    b = rng.permutation(n_oth)[:n_links]
    links = {f"i{x}": f"v{y}" for x, y in zip(a, b)}
    # linked objects share their label
    for x, y in zip(a, b):
        oth_objs[y] = SGObject(oth_objs[y].id, img_objs[x].label, oth_objs[y].attributes)

    def relations(prefix, n, k):
        rels = set()
        for _ in range(k):
            s, o = rng.integers(n, size=2)
            if s != o:
                rels.add((f"{prefix}{s}", str(rng.choice(_PREDICATES)), f"{prefix}{o}"))
        return rels

    img_rels = relations("i", n_img, int(rng.integers(0, 2 * n_img + 1)))
    oth_rels = relations("v", n_oth, int(rng.integers(0, 2 * n_oth + 1)))
    for s, p, o in img_rels:  # copy some relations across so persistence/evolution occur
        if s in links and o in links and rng.random() < 0.6:
            q = p if rng.random() < 0.6 else str(rng.choice(_PREDICATES))
            oth_rels.add((links[s], q, links[o]))
    kind = "image_video" if rng.random() < 0.5 else "image_3d"
    tag = "video" if kind == "image_video" else "3d"
    oth_rel_objs = []
    for s, p, o in sorted(oth_rels):
        frames = None
        if tag == "video" and rng.random() < 0.5:
            start = int(rng.integers(0, 20))
            frames = (start, start + int(rng.integers(1, 20)))
        oth_rel_objs.append(SGRelation(s, p, o, frames))
    return PairedSceneGraph(
        SceneGraph(tuple(img_objs), tuple(SGRelation(*r) for r in sorted(img_rels)), "image"),
        SceneGraph(tuple(oth_objs), tuple(oth_rel_objs), tag),
        links,
        kind,
        pair_id,
    )


def baby_toy_pair() -> PairedSceneGraph:
    """Baby pushes a toy walker in front of a sofa; the video adds an adult and a ball."""
    image = SceneGraph(
        (SGObject("b", "baby", ("left",)), SGObject("t", "toy", ("left",)), SGObject("s", "sofa", ("back",))),
        (SGRelation("b", "pushing", "t"), SGRelation("t", "in front of", "s")),
        "image",
    )
    video = SceneGraph(
        (SGObject("b2", "baby", ("right",)), SGObject("t2", "toy", ("right",)), SGObject("s2", "sofa", ("back",)),
         SGObject("a2", "adult", ("center",)), SGObject("ball2", "ball", ("front",))),
        (SGRelation("b2", "pushing", "t2", (0, 40)), SGRelation("t2", "in front of", "s2", (0, 40)),
         SGRelation("a2", "holding", "ball2", (25, 60))),
        "video",
    )
    return PairedSceneGraph(image, video, {"b": "b2", "t": "t2", "s": "s2"}, "image_video", "baby_toy")
