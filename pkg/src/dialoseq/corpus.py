"""Grounded-dialogue data model: episodes, flattening, synthetic tasks.

File formats (all versioned by a leading header/magic):

* Episode files: first line is a JSON header {"format": "dialoseq-episodes",
  "version": 1}; each following line is one JSON episode with fields
  task, persona[], knowledge, image_ref, turns[] of {speaker, text}.
* Feature stores: 8-byte magic ``DLSQFEA1`` then records of
  (u32 LE key length, utf-8 key, 2048 float32 LE values).
* Task registries: a single JSON document listing TaskSpec entries; split
  paths are stored relative to the registry file.

Flattened training pairs place persona, then knowledge, then history into
the context, each segment introduced by its separator special token, and
truncation keeps the most recent (suffix) tokens.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bpe
from .errors import DataError

EPISODE_FORMAT = "dialoseq-episodes"
EPISODE_VERSION = 1
FEATURE_MAGIC = b"DLSQFEA1"
FEATURE_DIM = 2048

SPEAKERS = ("A", "B")


@dataclass
class Episode:
    task: str
    persona: list[str]
    knowledge: str
    image_ref: str | None
    turns: list[tuple[str, str]]

    def validate(self):
        if not self.turns:
            raise DataError(f"episode in task '{self.task}' has no turns")
        for i, (speaker, _) in enumerate(self.turns):
            if speaker not in SPEAKERS:
                raise DataError(f"unknown speaker '{speaker}' in task '{self.task}'")
            if i > 0 and speaker == self.turns[i - 1][0]:
                raise DataError(f"speakers do not alternate in task '{self.task}' at turn {i}")


@dataclass
class TaskSpec:
    name: str
    weight: float = 1.0
    persona: bool = False
    knowledge: bool = False
    image: bool = False
    respondent: str = "B"
    splits: dict[str, str] = field(default_factory=dict)

    def validate(self):
        if self.weight < 0:
            raise DataError(f"task '{self.name}': weight must be >= 0, got {self.weight}")
        if self.respondent not in SPEAKERS:
            raise DataError(f"task '{self.name}': respondent must be one of {SPEAKERS}")


@dataclass
class Example:
    context_ids: list[int]
    target_ids: list[int]
    image_feature: np.ndarray | None
    task: str
    image_ref: str | None = None


class ImageFeatureStore:
    """key -> 2048-dim float32 vector map with a binary on-disk form."""

    def __init__(self, features: dict[str, np.ndarray] | None = None):
        self._features: dict[str, np.ndarray] = {}
        for key, vec in (features or {}).items():
            self.put(key, vec)

    def put(self, key: str, vec):
        arr = np.asarray(vec, dtype=np.float32)
        if arr.shape != (FEATURE_DIM,):
            raise DataError(
                f"feature '{key}': expected {FEATURE_DIM} values, got shape {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise DataError(f"feature '{key}': non-finite values")
        self._features[key] = arr

    def get(self, key: str) -> np.ndarray:
        if key not in self._features:
            raise DataError(f"no image feature stored under key '{key}'")
        return self._features[key]

    def __contains__(self, key: str) -> bool:
        return key in self._features

    def __len__(self) -> int:
        return len(self._features)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(FEATURE_MAGIC)
            for key in sorted(self._features):
                kb = key.encode("utf-8")
                f.write(struct.pack("<I", len(kb)))
                f.write(kb)
                f.write(self._features[key].astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ImageFeatureStore":
        store = cls()
        with open(path, "rb") as f:
            if f.read(len(FEATURE_MAGIC)) != FEATURE_MAGIC:
                raise DataError(f"{path}: not a dialoseq feature store (bad magic)")
            while True:
                head = f.read(4)
                if not head:
                    break
                if len(head) < 4:
                    raise DataError(f"{path}: truncated record header")
                (klen,) = struct.unpack("<I", head)
                key = f.read(klen).decode("utf-8")
                raw = f.read(FEATURE_DIM * 4)
                if len(raw) != FEATURE_DIM * 4:
                    raise DataError(f"{path}: truncated vector for key '{key}'")
                store.put(key, np.frombuffer(raw, dtype="<f4"))
        return store


# ------------------------------------------------------------ episode io


def save_episodes(path, episodes: list[Episode]):
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"format": EPISODE_FORMAT, "version": EPISODE_VERSION}) + "\n")
        for ep in episodes:
            record = {
                "task": ep.task,
                "persona": ep.persona,
                "knowledge": ep.knowledge,
                "image_ref": ep.image_ref,
                "turns": [{"speaker": s, "text": t} for s, t in ep.turns],
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_episodes(path, task_spec: TaskSpec) -> list[Episode]:
    """Parse and schema-validate one split file against its TaskSpec."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"episode file not found: {path}")
    episodes = []
    with open(path, encoding="utf-8") as f:
        first = f.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:1: bad header line: {e}") from e
        if header.get("format") != EPISODE_FORMAT or header.get("version") != EPISODE_VERSION:
            raise DataError(f"{path}:1: unsupported episode format/version: {header}")
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ep = Episode(
                    task=rec["task"],
                    persona=list(rec["persona"]),
                    knowledge=rec["knowledge"],
                    image_ref=rec["image_ref"],
                    turns=[(t["speaker"], t["text"]) for t in rec["turns"]],
                )
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: malformed episode record: {e}") from e
            try:
                ep.validate()
                _check_grounding(ep, task_spec)
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}") from e
            episodes.append(ep)
    return episodes


def _check_grounding(ep: Episode, spec: TaskSpec):
    if ep.task != spec.name:
        raise DataError(f"episode task '{ep.task}' does not match spec '{spec.name}'")
    if ep.persona and not spec.persona:
        raise DataError(f"task '{spec.name}' does not declare persona grounding")
    if ep.knowledge and not spec.knowledge:
        raise DataError(f"task '{spec.name}' does not declare knowledge grounding")
    if ep.image_ref is not None and not spec.image:
        raise DataError(f"task '{spec.name}' does not declare image grounding")


def episode_text_lines(episodes: list[Episode]):
    """All natural-language lines of a set of episodes (tokenizer training)."""
    for ep in episodes:
        yield from ep.persona
        if ep.knowledge:
            yield ep.knowledge
        for _, text in ep.turns:
            yield text


# ------------------------------------------------------------- flattening


def flatten(
    episode: Episode,
    vocab: bpe.Vocabulary,
    truncate: int = 1024,
    respondent: str = "B",
    use_persona: bool = True,
    use_knowledge: bool = True,
    use_image: bool = True,
) -> list[Example]:
    """One training Example per respondent turn.

    Context = persona lines + knowledge + all prior turns, each segment
    preceded by its separator special; truncation keeps the suffix. The
    use_* switches blank out grounding segments for ablation runs.
    """
    sp = vocab.specials
    persona_ids: list[int] = []
    if use_persona:
        for line in episode.persona:
            persona_ids.append(sp["sep_persona"])
            persona_ids.extend(vocab.encode(line))
    knowledge_ids: list[int] = []
    if use_knowledge and episode.knowledge:
        knowledge_ids.append(sp["sep_knowledge"])
        knowledge_ids.extend(vocab.encode(episode.knowledge))

    examples = []
    history: list[int] = []
    for speaker, text in episode.turns:
        if speaker == respondent and history:
            context = persona_ids + knowledge_ids + history
            target = vocab.encode(text) + [vocab.end_id]
            examples.append(
                Example(
                    context_ids=context[-truncate:],
                    target_ids=target,
                    image_feature=None,
                    task=episode.task,
                    image_ref=episode.image_ref if use_image else None,
                )
            )
        history = history + [sp["sep_turn"]] + vocab.encode(text)
    return examples


def attach_image(example: Example, store: ImageFeatureStore) -> Example:
    """Populate image_feature from the store; no-op for examples without a ref."""
    if example.image_ref is None:
        return example
    return dataclasses.replace(example, image_feature=store.get(example.image_ref))


def flatten_task(
    episodes: list[Episode],
    vocab: bpe.Vocabulary,
    spec: TaskSpec,
    store: ImageFeatureStore | None = None,
    truncate: int = 1024,
    use_knowledge: bool = True,
    use_image: bool = True,
) -> list[Example]:
    out = []
    for ep in episodes:
        for ex in flatten(
            ep,
            vocab,
            truncate=truncate,
            respondent=spec.respondent,
            use_knowledge=use_knowledge,
            use_image=use_image,
        ):
            if ex.image_ref is not None and store is not None:
                ex = attach_image(ex, store)
            out.append(ex)
    return out


# ---------------------------------------------------------- task registry

REGISTRY_FORMAT = "dialoseq-tasks"


def save_task_registry(path, specs: list[TaskSpec]):
    doc = {
        "format": REGISTRY_FORMAT,
        "version": 1,
        "tasks": [dataclasses.asdict(s) for s in specs],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_task_registry(path) -> dict[str, TaskSpec]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"task registry not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: not valid JSON: {e}") from e
    if doc.get("format") != REGISTRY_FORMAT:
        raise DataError(f"{path}: not a dialoseq task registry")
    specs = {}
    for entry in doc["tasks"]:
        spec = TaskSpec(**entry)
        spec.validate()
        # split paths are relative to the registry location
        spec.splits = {k: str(path.parent / v) for k, v in spec.splits.items()}
        specs[spec.name] = spec
    return specs


# ---------------------------------------------------------- synthetic suite

LEXICON = [c + v for c in "bdklmnprst" for v in "aeiou"][:24]
LOOKUP_KEYS = [f"k{i}" for i in range(8)]
LOOKUP_VALS = [f"v{i}" for i in range(8)]
IMGCOND_WORDS = ["red", "blue", "green", "gold", "pink", "gray", "cyan", "teal"]
_IMG_BLOCK = FEATURE_DIM // len(IMGCOND_WORDS)


def imgcond_feature(class_idx: int, rng: np.random.Generator) -> np.ndarray:
    """Class signature: a hot block of the vector plus small noise."""
    vec = rng.normal(0.0, 0.05, size=FEATURE_DIM).astype(np.float32)
    vec[class_idx * _IMG_BLOCK : (class_idx + 1) * _IMG_BLOCK] += 1.0
    return vec


def synth_suite(
    seed: int,
    out_dir,
    n_train: int = 600,
    n_valid: int = 100,
    n_test: int = 100,
) -> dict[str, TaskSpec]:
    """Generate the four synthetic task families under out_dir.

    copy: the target repeats the last turn verbatim.
    reverse: the target reverses the word order of the last turn.
    lookup: the answer appears only in the knowledge passage.
    imgcond: the answer is determined by the class encoded in the image vector.

    Deterministic: the same seed yields byte-identical files.
    """
    import random

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rnd = random.Random(seed)
    np_rng = np.random.default_rng(seed)
    sizes = {"train": n_train, "valid": n_valid, "test": n_test}

    def phrase():
        return " ".join(rnd.choice(LEXICON) for _ in range(rnd.randint(3, 7)))

    def copy_episode(_):
        p = phrase()
        return Episode("copy", [], "", None, [("A", p), ("B", p)])

    def reverse_episode(_):
        p = phrase()
        return Episode("reverse", [], "", None, [("A", p), ("B", " ".join(reversed(p.split())))])

    def lookup_episode(_):
        keys = rnd.sample(LOOKUP_KEYS, 3)
        vals = [rnd.choice(LOOKUP_VALS) for _ in keys]
        knowledge = " ".join(f"key {k} val {v}" for k, v in zip(keys, vals))
        ask = rnd.randrange(3)
        return Episode(
            "lookup", [], knowledge, None, [("A", f"{keys[ask]} ?"), ("B", vals[ask])]
        )

    store = ImageFeatureStore()
    img_counter = 0

    def imgcond_episode(_):
        nonlocal img_counter
        cls = rnd.randrange(len(IMGCOND_WORDS))
        ref = f"img{img_counter:05d}"
        img_counter += 1
        store.put(ref, imgcond_feature(cls, np_rng))
        return Episode(
            "imgcond", [], "", ref, [("A", "what do you see ?"), ("B", IMGCOND_WORDS[cls])]
        )

    families = {
        "copy": (copy_episode, {}),
        "reverse": (reverse_episode, {}),
        "lookup": (lookup_episode, {"knowledge": True}),
        "imgcond": (imgcond_episode, {"image": True}),
    }

    specs = {}
    for name, (gen, flags) in families.items():
        task_dir = out_dir / name
        task_dir.mkdir(exist_ok=True)
        splits = {}
        for split, n in sizes.items():
            episodes = [gen(i) for i in range(n)]
            rel = f"{name}/{split}.jsonl"
            save_episodes(out_dir / rel, episodes)
            splits[split] = rel
        specs[name] = TaskSpec(name=name, weight=1.0, splits=splits, **flags)

    store.save(out_dir / "features.bin")
    save_task_registry(out_dir / "tasks.json", list(specs.values()))
    # registry loading resolves relative paths; return the resolved mapping
    return load_task_registry(out_dir / "tasks.json")
