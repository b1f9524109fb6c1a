"""Fine-grained shape description corpus built from visual question answering.

For every model one rendered view is shown to a VQA backend with four kinds
of questions (category, per-component existence, quantity, appearance). The
answers are composed into a paragraph, compressed to 50-58 words and written
as one JSONL record per model.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .data import load_image, seeded_rng
from .embedders import NUM_VIEWS, BackendError

log = logging.getLogger(__name__)

MIN_WORDS, MAX_WORDS = 50, 58
TOO_SHORT_WORDS = 10

CATEGORY_Q = "Please describe the geometric appearance of the {category}?"
EXISTENCE_Q = "Does the {category} have {component}?"
QUANTITY_Q = "How many {component} does the {category} have"
APPEARANCE_Q = "Please provide some rich geometric structure descriptors for {component} of the {category}?"
COMPRESS_Q = "Summarize the following description in 50 to 58 words: {text}"

NUMBER_WORDS = {
    "zero": 0, "one": 1, "single": 1, "a pair of": 2, "two": 2, "three": 3, "four": 4,
    "five": 5, "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10, "eleven": 11,
    "twelve": 12, "thirteen": 13, "fourteen": 14, "fifteen": 15, "sixteen": 16,
    "seventeen": 17, "eighteen": 18, "nineteen": 19, "twenty": 20,
}
_NUM_RE = re.compile(r"\b(\d+|" + "|".join(sorted((w for w in NUMBER_WORDS), key=len, reverse=True)) + r")\b")

# generic padding; must not name any component in the shipped taxonomy
FILLER = [
    "Its overall shape is compact and well proportioned.",
    "The surfaces are smooth with clean straight edges.",
    "The structure looks balanced and symmetric.",
    "Its parts meet at sharp right angles.",
    "The outline is simple and regular.",
    "The geometry is solid and evenly spaced.",
]


class CorpusError(RuntimeError):
    pass


class TaxonomyError(CorpusError):
    pass


class CompositionError(CorpusError):
    pass


class TooShortError(CorpusError):
    pass


# taxonomy -------------------------------------------------------------------

def parse_taxonomy(text: str) -> dict[str, list[str]]:
    tax: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        cat, sep, rest = line.partition(":")
        comps = [c.strip() for c in rest.split(",") if c.strip()]
        if not sep or not cat.strip() or not comps:
            raise TaxonomyError(f"taxonomy line {lineno}: expected 'category: a, b, ...'")
        for name in [cat.strip(), *comps]:
            if name != name.lower():
                raise TaxonomyError(f"taxonomy line {lineno}: {name!r} must be lowercase")
        tax[cat.strip()] = comps
    return tax


def load_taxonomy(path=None) -> dict[str, list[str]]:
    if path is None:
        return parse_taxonomy(resources.files("mmcomplete").joinpath("taxonomy.txt").read_text())
    return parse_taxonomy(Path(path).read_text())


# text utilities -------------------------------------------------------------

def words(text: str) -> list[str]:
    """Whitespace tokens after stripping punctuation."""
    return [w for w in re.sub(r"[^\w\s'-]", " ", text).split() if re.search(r"\w", w)]


def word_count(text: str) -> int:
    return len(words(text))


def plural(noun: str) -> str:
    if noun.endswith(("s", "x", "ch", "sh")):
        return noun + "es"
    if noun.endswith("f"):
        return noun[:-1] + "ves"
    if noun.endswith("y") and noun[-2:-1] not in "aeiou":
        return noun[:-1] + "ies"
    return noun + "s"


def mentions(text: str, component: str) -> bool:
    forms = {component, plural(component), component + "s"}
    return any(w.lower() in forms for w in words(text))


def sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"(?<=[.!?])\s+", text.strip()) if s.strip()]


def _sentence(text: str) -> str:
    text = " ".join(text.split())
    return text if text.endswith((".", "!", "?")) else text + "."


# backends -------------------------------------------------------------------

class TextBackend:
    """Prompt (plus optional image) in, text out. Shared by VQA and compression."""

    name = "base"
    extractive = False

    def ask(self, prompt: str, image: Optional[np.ndarray] = None) -> str:
        raise NotImplementedError


def _image_key(image) -> str:
    if image is None:
        return "-"
    return hashlib.sha256(np.ascontiguousarray(image, dtype="<f4").tobytes()).hexdigest()[:16]


class StubTextBackend(TextBackend):
    """Deterministic answers derived from a hash of (seed, image, question)."""

    name = "stub"
    extractive = True

    COLORS = ["brown", "white", "black", "grey", "red", "blue", "wooden", "silver"]
    STYLES = ["office", "modern", "classic", "simple", "sturdy", "minimalist", "vintage", "compact"]
    SHAPES = ["rectangular", "round", "square", "cylindrical", "curved", "flat", "tapered", "oval"]
    DETAILS = [
        "smooth rounded corners and a uniform thickness",
        "a thin straight profile that narrows slightly toward the end",
        "a slightly curved surface with even proportions",
        "sharp edges and a solid symmetric form",
        "a wide flat face and a shallow bevel along the rim",
        "a long slender outline with a gentle taper",
    ]

    def __init__(self, seed: int = 0, yes_rate: float = 0.75):
        self.seed = seed
        self.yes_rate = yes_rate

    def _rng(self, prompt, image):
        return seeded_rng("stub-vqa", self.seed, _image_key(image), prompt)

    def ask(self, prompt, image=None):
        rng = self._rng(prompt, image)
        if m := re.fullmatch(r"Please describe the geometric appearance of the (.+)\?", prompt):
            return f"This is a {rng.choice(self.COLORS)} {rng.choice(self.STYLES)} {m[1]}."
        if re.fullmatch(r"Does the (.+) have (.+)\?", prompt):
            return "yes" if rng.uniform() < self.yes_rate else "no"
        if m := re.fullmatch(r"How many (.+) does the (.+) have", prompt):
            n = int(rng.integers(1, 7))
            word = [k for k, v in NUMBER_WORDS.items() if v == n and " " not in k and k != "single"][0]
            return f"The {m[2]} has {word} {m[1] if n == 1 else plural(m[1])}."
        if m := re.fullmatch(r"Please provide some rich geometric structure descriptors for (.+) of the (.+)\?", prompt):
            return (f"The {m[1]} of this {m[2]} has a {rng.choice(self.SHAPES)} appearance "
                    f"with {rng.choice(self.DETAILS)}.")
        if prompt.startswith(COMPRESS_Q.split("{")[0]):
            return extractive_compress(prompt[len(COMPRESS_Q.split("{")[0]):])
        return "I am not sure."


class ReplayBackend(TextBackend):
    """Serves answers from recorded transcripts (JSONL of key/prompt/reply)."""

    name = "replay"

    def __init__(self, transcripts: Union[str, Path, dict]):
        if isinstance(transcripts, dict):
            self.table = dict(transcripts)
        else:
            self.table = {}
            with open(transcripts) as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self.table[(rec["image"], rec["prompt"])] = rec["reply"]

    def ask(self, prompt, image=None):
        key = (_image_key(image), prompt)
        if key not in self.table:
            raise BackendError(f"no recorded reply for {prompt!r}")
        return self.table[key]


class RecordingBackend(TextBackend):
    """Wraps a backend and keeps a transcript that :class:`ReplayBackend` can serve."""

    def __init__(self, inner: TextBackend):
        self.inner = inner
        self.name = f"recording:{inner.name}"
        self.extractive = inner.extractive
        self.records: list[dict] = []

    def ask(self, prompt, image=None):
        reply = self.inner.ask(prompt, image)
        self.records.append({"image": _image_key(image), "prompt": prompt, "reply": reply})
        return reply

    def dump(self, path):
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")


class ExternalTextBackend(TextBackend):
    """HTTP VQA/summarization service: ``POST /generate`` -> ``{"text": ...}``.

    A request timeout surfaces as :class:`TimeoutError`; retrying is the
    caller's job.
    """

    name = "external"

    def __init__(self, endpoint: str, timeout: float = 60.0, client=None):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self._client = client or httpx.Client(timeout=timeout)

    def ask(self, prompt, image=None):
        import httpx

        body = {"prompt": prompt}
        if image is not None:
            body["image_shape"] = list(np.shape(image))
            body["image_b64"] = base64.b64encode(np.ascontiguousarray(image, dtype="<f4").tobytes()).decode()
        try:
            resp = self._client.post(f"{self.endpoint}/generate", json=body, timeout=self.timeout)
            resp.raise_for_status()
        except httpx.TimeoutException as exc:
            raise TimeoutError(str(exc)) from exc
        except httpx.HTTPError as exc:
            raise BackendError(f"text backend request failed: {exc}", attempts=1, last_error=exc) from exc
        return str(resp.json()["text"])


def make_text_backend(kind: str, seed: int = 0, transcripts=None, endpoint: str = "") -> TextBackend:
    if kind == "stub":
        return StubTextBackend(seed)
    if kind == "replay":
        if not transcripts:
            raise ValueError("replay backend needs a transcripts file")
        return ReplayBackend(transcripts)
    if kind == "external":
        if not endpoint:
            raise ValueError("external backend needs an endpoint")
        return ExternalTextBackend(endpoint)
    raise ValueError(f"unknown text backend {kind!r}")


# question answering ---------------------------------------------------------

@dataclass
class QAAnswer:
    kind: str
    component: Optional[str]
    raw_text: str
    parsed: Union[str, bool, int, None]
    parse_error: bool = False

    def to_dict(self) -> dict:
        return {"kind": self.kind, "component": self.component, "raw_text": self.raw_text,
                "parsed": self.parsed, "parse_error": self.parse_error}


@dataclass
class RetryPolicy:
    retries: int = 2
    backoff: float = 0.5


def _ask(backend: TextBackend, prompt: str, image, policy: RetryPolicy) -> str:
    last = None
    for attempt in range(policy.retries + 1):
        try:
            return backend.ask(prompt, image)
        except TimeoutError as exc:
            last = exc
            log.warning("backend timeout on %r (attempt %d)", prompt, attempt + 1)
            if attempt < policy.retries and policy.backoff:
                time.sleep(policy.backoff * 2**attempt)
    raise BackendError(f"backend timed out {policy.retries + 1} times on {prompt!r}",
                       attempts=policy.retries + 1, last_error=last)


def parse_yes_no(text: str) -> Optional[bool]:
    tokens = [w.lower() for w in words(text)]
    if not tokens:
        return None
    if tokens[0] == "yes":
        return True
    if tokens[0] == "no":
        return False
    return None


def parse_count(text: str) -> Union[int, str]:
    m = _NUM_RE.search(text.lower())
    if not m:
        return "unknown"
    tok = m[1]
    return int(tok) if tok.isdigit() else NUMBER_WORDS[tok]


def ask_category(image, category, backend, taxonomy=None, policy=RetryPolicy()) -> QAAnswer:
    if taxonomy is not None and category not in taxonomy:
        raise TaxonomyError(f"unknown category {category!r}")
    raw = _ask(backend, CATEGORY_Q.format(category=category), image, policy)
    return QAAnswer("category", None, raw, raw.strip())


def ask_existence(image, category, component, backend, policy=RetryPolicy()) -> QAAnswer:
    raw = _ask(backend, EXISTENCE_Q.format(category=category, component=component), image, policy)
    parsed = parse_yes_no(raw)
    # unparseable replies count as absent
    return QAAnswer("existence", component, raw, bool(parsed), parse_error=parsed is None)


def ask_quantity(image, category, component, backend, policy=RetryPolicy()) -> QAAnswer:
    raw = _ask(backend, QUANTITY_Q.format(category=category, component=component), image, policy)
    return QAAnswer("quantity", component, raw, parse_count(raw))


def ask_appearance(image, category, component, backend, policy=RetryPolicy()) -> QAAnswer:
    raw = _ask(backend, APPEARANCE_Q.format(category=category, component=component), image, policy)
    return QAAnswer("appearance", component, raw, raw.strip())


def ask_all(image, category, taxonomy, backend, policy=RetryPolicy()) -> list[QAAnswer]:
    """Full question sequence for one view; quantity/appearance only for present parts."""
    answers = [ask_category(image, category, backend, taxonomy, policy)]
    for comp in taxonomy[category]:
        ex = ask_existence(image, category, comp, backend, policy)
        answers.append(ex)
        if ex.parsed:
            answers.append(ask_quantity(image, category, comp, backend, policy))
            answers.append(ask_appearance(image, category, comp, backend, policy))
    return answers


# composition and compression ------------------------------------------------

def _absent(answers) -> list[str]:
    return [a.component for a in answers if a.kind == "existence" and not a.parsed]


def compose_description(answers: Sequence[QAAnswer], components: Optional[Sequence[str]] = None,
                        category: Optional[str] = None) -> str:
    """Category sentence, then quantity and appearance of each present component.

    Any sentence naming an absent component is dropped; a category sentence
    that does so falls back to the plain template.
    """
    cats = [a for a in answers if a.kind == "category"]
    if len(cats) != 1:
        raise CompositionError(f"expected exactly one category answer, got {len(cats)}")
    absent = _absent(answers)
    present = {a.component for a in answers if a.kind == "existence" and a.parsed}
    if components is None:
        components = list(dict.fromkeys(a.component for a in answers if a.component))

    def clean(text):
        return all(not mentions(text, c) for c in absent)

    head = _sentence(cats[0].raw_text)
    if not clean(head):
        head = f"This is a {category or words(head)[-1]}."
    parts = [head]
    for comp in components:
        if comp not in present:
            continue
        for kind in ("quantity", "appearance"):
            for a in answers:
                if a.kind != kind or a.component != comp:
                    continue
                if kind == "quantity" and a.parsed == "unknown":
                    continue
                parts.extend(s for s in sentences(_sentence(a.raw_text)) if clean(s))
    return " ".join(parts)


def _clauses(text: str) -> list[str]:
    return [c.strip() for c in re.findall(r"[^,;.!?]+[,;.!?]?", text) if c.strip()]


def extractive_compress(text: str, padding: Sequence[str] = (), lo: int = MIN_WORDS, hi: int = MAX_WORDS) -> str:
    """Trim at clause boundaries (or pad) until the word count lands in [lo, hi]."""
    text = " ".join(text.split())
    n = word_count(text)
    if n < TOO_SHORT_WORDS:
        raise TooShortError(f"text has {n} words (< {TOO_SHORT_WORDS})")
    if lo <= n <= hi:
        return text
    out: list[str] = []
    total = 0
    pool = _clauses(text) + [p for p in padding if p not in text]
    for clause in pool:
        wc = word_count(clause)
        if wc and total + wc <= hi:
            out.append(clause)
            total += wc
        if total >= lo:
            break
    i = 0
    while total < lo:
        # every filler sentence is shorter than hi - lo, so it always fits
        filler = FILLER[i % len(FILLER)]
        out.append(filler)
        total += word_count(filler)
        i += 1
    result = " ".join(out)
    return result[:-1] + "." if result[-1] in ",;" else (result if result[-1] in ".!?" else result + ".")


def compress(text: str, backend: TextBackend, padding: Sequence[str] = (), policy=RetryPolicy(),
             absent: Sequence[str] = ()) -> str:
    """Bring a description into the 50-58 word range.

    Extractive backends are handled locally; generative ones are asked to
    summarize and their reply is trimmed or padded if it misses the range.
    Summary sentences naming an ``absent`` component are dropped, since a
    summarizer may reintroduce parts the existence answers ruled out.
    """
    if not text.strip():
        raise ValueError("text must be non-empty")
    n = word_count(text)
    if n < TOO_SHORT_WORDS:
        raise TooShortError(f"text has {n} words (< {TOO_SHORT_WORDS})")
    if MIN_WORDS <= n <= MAX_WORDS or backend.extractive:
        return extractive_compress(text, padding)
    reply = _ask(backend, COMPRESS_Q.format(text=text), None, policy)
    reply = " ".join(s for s in sentences(reply) if not any(mentions(s, c) for c in absent))
    if word_count(reply) < TOO_SHORT_WORDS:
        reply = text
    return extractive_compress(reply, padding)


# corpus records -------------------------------------------------------------

@dataclass
class CorpusEntry:
    model_id: str
    category: str
    view_id: int
    answers: list[QAAnswer]
    description: str
    word_count: int
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "model_id": self.model_id, "category": self.category, "view_id": self.view_id,
            "answers": [a.to_dict() for a in self.answers], "description": self.description,
            "word_count": self.word_count, "flags": self.flags,
        }, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusEntry":
        return cls(d["model_id"], d["category"], d["view_id"], [QAAnswer(**a) for a in d["answers"]],
                   d["description"], d["word_count"], list(d.get("flags", [])))


RECORD_SCHEMA = {
    "type": "object",
    "required": ["model_id", "category", "view_id", "answers", "description", "word_count", "flags"],
    "additionalProperties": False,
    "properties": {
        "model_id": {"type": "string", "minLength": 1},
        "category": {"type": "string", "minLength": 1},
        "view_id": {"type": "integer", "minimum": 0, "maximum": NUM_VIEWS - 1},
        "answers": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["kind", "component", "raw_text", "parsed", "parse_error"],
                "properties": {
                    "kind": {"enum": ["category", "existence", "quantity", "appearance"]},
                    "component": {"type": ["string", "null"]},
                    "raw_text": {"type": "string"},
                    "parsed": {"type": ["string", "boolean", "integer", "null"]},
                    "parse_error": {"type": "boolean"},
                },
            },
        },
        "description": {"type": "string"},
        "word_count": {"type": "integer", "minimum": 0},
        "flags": {"type": "array", "items": {"type": "string"}},
    },
}


def describe_model(image, category, taxonomy, backend, policy=RetryPolicy()):
    """(answers, description, flags) for one rendered view."""
    answers = ask_all(image, category, taxonomy, backend, policy)
    text = compose_description(answers, taxonomy[category], category)
    absent = _absent(answers)
    padding = [s for a in answers if a.kind == "appearance" and a.parsed is not None
               for s in sentences(_sentence(a.raw_text)) if not any(mentions(s, c) for c in absent)]
    flags = [f"parse-error:{a.component}" for a in answers if a.parse_error]
    try:
        description = compress(text, backend, padding, policy, absent)
    except TooShortError:
        description = text
        flags.append("too-short")
    return answers, description, flags


def _model_dirs(root: Path, taxonomy) -> list[tuple[str, str, Path]]:
    out = []
    for cdir in sorted(p for p in root.iterdir() if p.is_dir()):
        for mdir in sorted(p for p in cdir.iterdir() if p.is_dir()):
            out.append((mdir.name, cdir.name, mdir))
    return sorted(out)


def _read_done(out: Path) -> list[str]:
    """Valid lines of an existing output; a torn trailing line is dropped."""
    if not out.exists():
        return []
    lines = []
    for line in out.read_text().splitlines(keepends=True):
        if not line.endswith("\n"):
            break
        try:
            json.loads(line)
        except json.JSONDecodeError:
            break
        lines.append(line)
    return lines


def build_corpus(root, taxonomy, backend: TextBackend, seed: int, out, resume: bool = False,
                 concurrency: int = 1, policy: RetryPolicy = RetryPolicy(), limit: Optional[int] = None) -> Path:
    """Describe every model under ``root`` and write sorted JSONL to ``out``.

    With ``resume`` the ids already in ``out`` are kept and skipped.
    ``limit`` stops after that many new entries (used to exercise resuming).
    """
    root, out = Path(root), Path(out)
    done_lines = _read_done(out) if resume else []
    done = {json.loads(line)["model_id"] for line in done_lines}
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(done_lines))

    todo = []
    for model_id, category, mdir in _model_dirs(root, taxonomy):
        if model_id in done:
            continue
        if category not in taxonomy:
            log.warning("skipping %s: category %r not in taxonomy", model_id, category)
            continue
        todo.append((model_id, category, mdir))
    if limit is not None:
        todo = todo[:limit]

    def work(item):
        model_id, category, mdir = item
        view = int(seeded_rng("corpus-view", seed, model_id).integers(0, NUM_VIEWS))
        path = mdir / f"render_{view:02d}.img"
        if not path.exists():
            log.warning("skipping %s: missing render %s", model_id, path.name)
            return None
        try:
            image = load_image(path, view).pixels
            answers, description, flags = describe_model(image, category, taxonomy, backend, policy)
        except (BackendError, OSError, ValueError) as exc:
            log.warning("skipping %s: %s", model_id, exc)
            return None
        return CorpusEntry(model_id, category, view, answers, description, word_count(description), flags)

    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool, open(out, "a") as fh:
        for entry in pool.map(work, todo):
            if entry is not None:
                fh.write(entry.to_json() + "\n")
                fh.flush()

    lines = out.read_text().splitlines(keepends=True)
    ordered = sorted(lines, key=lambda line: json.loads(line)["model_id"])
    if ordered != lines:
        out.write_text("".join(ordered))
    return out


def read_corpus(path) -> list[CorpusEntry]:
    with open(path) as fh:
        return [CorpusEntry.from_dict(json.loads(line)) for line in fh if line.strip()]
