import json

import httpx
import jsonschema
import numpy as np
import pytest

from mmcomplete.cli import main
from mmcomplete.corpus import (
    APPEARANCE_Q, CATEGORY_Q, EXISTENCE_Q, FILLER, QUANTITY_Q, RECORD_SCHEMA, CompositionError, ExternalTextBackend,
    QAAnswer, RecordingBackend, ReplayBackend, RetryPolicy, StubTextBackend, TaxonomyError, TextBackend,
    TooShortError, ask_all, ask_appearance, ask_category, ask_existence, ask_quantity, build_corpus, compose_description,
    compress, describe_model, load_taxonomy, mentions, parse_taxonomy, read_corpus, word_count,
)
from mmcomplete.data import synth_generate
from mmcomplete.embedders import BackendError

TAXONOMY = load_taxonomy()
NO_WAIT = RetryPolicy(retries=2, backoff=0)


class Scripted(TextBackend):
    def __init__(self, replies):
        self.replies = replies
        self.prompts = []

    def ask(self, prompt, image=None):
        self.prompts.append(prompt)
        reply = self.replies(prompt) if callable(self.replies) else self.replies[prompt]
        if isinstance(reply, Exception):
            raise reply
        return reply


def reference_chair_backend():
    q = dict(category="chair")
    return Scripted({
        CATEGORY_Q.format(**q): "This is a brown office chair.",
        EXISTENCE_Q.format(component="back", **q): "yes",
        EXISTENCE_Q.format(component="seat", **q): "yes",
        EXISTENCE_Q.format(component="leg", **q): "yes",
        EXISTENCE_Q.format(component="arm", **q): "no",
        QUANTITY_Q.format(component="back", **q): "The chair has one back.",
        QUANTITY_Q.format(component="seat", **q): "The chair has one seat.",
        QUANTITY_Q.format(component="leg", **q): "The chair has four legs.",
        APPEARANCE_Q.format(component="back", **q): "The back of this chair has a tall curved appearance",
        APPEARANCE_Q.format(component="seat", **q): "The seat of this chair has a rectangular appearance",
        APPEARANCE_Q.format(component="leg", **q): "The leg of this chair has a thin straight appearance",
    })


class TestTaxonomy:
    def test_default_has_13_categories(self):
        assert len(TAXONOMY) == 13
        assert TAXONOMY["chair"] == ["back", "seat", "leg", "arm"]
        assert TAXONOMY["lamp"] == ["base", "stem", "shade"]

    def test_parse_errors(self):
        assert parse_taxonomy("# comment\nchair: seat, leg\n") == {"chair": ["seat", "leg"]}
        with pytest.raises(TaxonomyError):
            parse_taxonomy("chair seat leg")

    def test_filler_is_component_free(self):
        comps = {c for cs in TAXONOMY.values() for c in cs}
        assert not [(f, c) for f in FILLER for c in comps if mentions(f, c)]


class TestQuestions:
    def test_reference_category_example(self):
        a = ask_category(None, "chair", reference_chair_backend(), TAXONOMY)
        assert a.kind == "category" and a.raw_text == "This is a brown office chair."

    def test_stub_category_deterministic(self):
        a = ask_category(None, "chair", StubTextBackend(1), TAXONOMY)
        b = ask_category(None, "chair", StubTextBackend(1), TAXONOMY)
        assert a == b and "chair" in a.raw_text

    def test_unknown_category(self):
        with pytest.raises(TaxonomyError):
            ask_category(None, "spaceship", StubTextBackend(), TAXONOMY)

    @pytest.mark.parametrize("reply,parsed,err", [("yes", True, False), ("No.", False, False), ("YES, it does", True, False),
                                                  ("maybe", False, True), ("", False, True)])
    def test_existence_parsing(self, reply, parsed, err):
        a = ask_existence(None, "chair", "leg", Scripted(lambda p: reply))
        assert (a.parsed, a.parse_error) == (parsed, err)

    @pytest.mark.parametrize("reply,expected", [("The chair has four legs.", 4), ("2", 2), ("It has many legs", "unknown"),
                                                ("twelve spokes", 12), ("No legs here", "unknown")])
    def test_quantity_parsing(self, reply, expected):
        assert ask_quantity(None, "chair", "leg", Scripted(lambda p: reply)).parsed == expected

    def test_appearance_verbatim(self):
        a = ask_appearance(None, "chair", "seat", reference_chair_backend())
        assert a.raw_text == "The seat of this chair has a rectangular appearance"

    def test_timeout_retries_then_backend_error(self):
        calls = []

        def flaky(prompt):
            calls.append(prompt)
            return TimeoutError("slow") if len(calls) <= 2 else "yes"

        assert ask_existence(None, "chair", "leg", Scripted(flaky), NO_WAIT).parsed is True
        with pytest.raises(BackendError) as info:
            ask_existence(None, "chair", "leg", Scripted(lambda p: TimeoutError("slow")), NO_WAIT)
        assert info.value.attempts == 3

    def test_absent_components_not_followed_up(self):
        backend = reference_chair_backend()
        answers = ask_all(None, "chair", TAXONOMY, backend)
        assert not any("arm" in p for p in backend.prompts if not p.startswith("Does"))
        assert [a.kind for a in answers].count("quantity") == 3


class TestCompose:
    def test_reference_golden(self):
        answers = ask_all(None, "chair", TAXONOMY, reference_chair_backend())
        text = compose_description(answers, TAXONOMY["chair"], "chair")
        for phrase in ("brown office chair", "four legs", "rectangular"):
            assert phrase in text
        assert text.startswith("This is a brown office chair.")
        assert "\n" not in text

    def test_absent_component_dropped(self):
        answers = [QAAnswer("category", None, "This is a chair with a leg.", "x"),
                   QAAnswer("existence", "leg", "no", False),
                   QAAnswer("existence", "seat", "yes", True),
                   QAAnswer("quantity", "seat", "The chair has one seat.", 1),
                   QAAnswer("appearance", "seat", "The seat is flat. Each leg is thin.", "x")]
        text = compose_description(answers, ["seat", "leg"], "chair")
        assert not mentions(text, "leg")
        assert text == "This is a chair. The chair has one seat. The seat is flat."

    def test_taxonomy_order(self):
        answers = ask_all(None, "chair", TAXONOMY, reference_chair_backend())
        text = compose_description(answers, TAXONOMY["chair"], "chair")
        assert text.index("back of") < text.index("seat of") < text.index("leg of")

    def test_category_answer_count(self):
        with pytest.raises(CompositionError):
            compose_description([])
        two = [QAAnswer("category", None, "This is a chair.", "x")] * 2
        with pytest.raises(CompositionError):
            compose_description(two)


def text_of(n, seed=0):
    rng = np.random.default_rng(seed)
    vocab = ["tall", "narrow", "smooth", "frame", "edge", "surface", "curved", "panel", "flat", "wide"]
    chunks = [" ".join(rng.choice(vocab, 5)) + "," for _ in range(n // 5)]
    return " ".join(chunks + list(rng.choice(vocab, n % 5)))


class TestCompress:
    def test_200_words(self):
        out = compress(text_of(200), StubTextBackend())
        assert 50 <= word_count(out) <= 58

    def test_54_unchanged(self):
        text = text_of(54)
        assert word_count(text) == 54
        assert compress(text, StubTextBackend()) == text

    def test_8_words_too_short(self):
        with pytest.raises(TooShortError):
            compress(text_of(8), StubTextBackend())

    def test_short_text_padded(self):
        out = compress(text_of(20), StubTextBackend(), ["The seat is a flat square panel."])
        assert 50 <= word_count(out) <= 58
        assert "flat square panel" in out

    def test_empty(self):
        with pytest.raises(ValueError):
            compress("  ", StubTextBackend())

    @pytest.mark.parametrize("n", range(10, 400, 13))
    def test_range_over_lengths(self, n):
        assert 50 <= word_count(compress(text_of(n, n), StubTextBackend())) <= 58

    def test_generative_backend_reply_is_clamped(self):
        out = compress(text_of(120), Scripted(lambda p: text_of(90, 5)))
        assert 50 <= word_count(out) <= 58

    def test_too_short_flagged_in_entry(self):
        q = dict(category="lamp")
        backend = Scripted(lambda p: "This is a lamp." if p == CATEGORY_Q.format(**q) else "no")
        _, desc, flags = describe_model(None, "lamp", TAXONOMY, backend)
        assert "too-short" in flags and desc == "This is a lamp."


class RandomTranscript(TextBackend):
    """Adversarial answers: sentences freely name other components."""

    def __init__(self, category, seed):
        self.rng = np.random.default_rng(seed)
        self.comps = TAXONOMY[category]

    def ask(self, prompt, image=None):
        r = self.rng
        other = r.choice(self.comps)
        if prompt.startswith("Please describe"):
            return f"This is a grey item with a {other}." if r.uniform() < 0.3 else "This is a grey item."
        if prompt.startswith("Does"):
            return str(r.choice(["yes", "no", "Yes.", "No", "maybe", "definitely"]))
        if prompt.startswith("How many"):
            return str(r.choice([f"It has {r.integers(1, 5)} parts.", f"There are two {other}s.", "several"]))
        return (f"It is {r.choice(['round', 'flat', 'long'])} and smooth with a slight bevel along its outer edge. "
                f"It sits next to the {other}.")


@pytest.mark.parametrize("seed", range(100))
def test_existence_filter_random_transcripts(seed):
    category = sorted(TAXONOMY)[seed % len(TAXONOMY)]
    answers, desc, flags = describe_model(None, category, TAXONOMY, RandomTranscript(category, seed))
    absent = [a.component for a in answers if a.kind == "existence" and not a.parsed]
    assert not [c for c in absent if mentions(desc, c)]
    assert 50 <= word_count(desc) <= 58 or "too-short" in flags


class TestBackends:
    def test_record_then_replay(self):
        rec = RecordingBackend(StubTextBackend(3))
        image = np.ones((3, 224, 224))
        first = ask_all(image, "chair", TAXONOMY, rec)
        table = {(r["image"], r["prompt"]): r["reply"] for r in rec.records}
        assert ask_all(image, "chair", TAXONOMY, ReplayBackend(table)) == first

    def test_replay_from_file_and_miss(self, tmp_path):
        rec = RecordingBackend(StubTextBackend())
        ask_category(None, "lamp", rec)
        rec.dump(tmp_path / "t.jsonl")
        replay = ReplayBackend(tmp_path / "t.jsonl")
        assert ask_category(None, "lamp", replay).raw_text == rec.records[0]["reply"]
        with pytest.raises(BackendError):
            ask_category(None, "chair", replay)

    def test_external_backend(self):
        seen = []

        def handler(request):
            body = json.loads(request.content)
            seen.append(body)
            if body["prompt"].startswith("Does"):
                raise httpx.ReadTimeout("slow", request=request)
            return httpx.Response(200, json={"text": "This is a red car."})

        backend = ExternalTextBackend("http://vqa", client=httpx.Client(transport=httpx.MockTransport(handler)))
        assert ask_category(np.zeros((3, 224, 224)), "car", backend).raw_text == "This is a red car."
        assert seen[0]["image_shape"] == [3, 224, 224]
        with pytest.raises(BackendError):
            ask_existence(None, "car", "wheel", backend, NO_WAIT)
        assert len(seen) == 4


@pytest.fixture(scope="module")
def corpus_root(tmp_path_factory):
    return synth_generate(tmp_path_factory.mktemp("corpus") / "data", 5, ["chair", "lamp"], seed=2)


class TestBuild:
    def test_deterministic_and_valid(self, corpus_root, tmp_path):
        a = build_corpus(corpus_root, TAXONOMY, StubTextBackend(7), 7, tmp_path / "a.jsonl")
        b = build_corpus(corpus_root, TAXONOMY, StubTextBackend(7), 7, tmp_path / "b.jsonl", concurrency=3)
        assert a.read_bytes() == b.read_bytes()
        entries = read_corpus(a)
        assert len(entries) == 10
        assert [e.model_id for e in entries] == sorted(e.model_id for e in entries)
        for line in a.read_text().splitlines():
            jsonschema.validate(json.loads(line), RECORD_SCHEMA)
        for e in entries:
            assert 50 <= e.word_count <= 58 or "too-short" in e.flags
            assert e.word_count == word_count(e.description)

    def test_resume_matches_uninterrupted(self, corpus_root, tmp_path):
        full = build_corpus(corpus_root, TAXONOMY, StubTextBackend(7), 7, tmp_path / "full.jsonl")
        part = build_corpus(corpus_root, TAXONOMY, StubTextBackend(7), 7, tmp_path / "part.jsonl", limit=4)
        with open(part, "a") as fh:
            fh.write('{"model_id": "torn')
        build_corpus(corpus_root, TAXONOMY, StubTextBackend(7), 7, part, resume=True)
        assert part.read_bytes() == full.read_bytes()

    def test_seed_changes_views(self, corpus_root, tmp_path):
        a = read_corpus(build_corpus(corpus_root, TAXONOMY, StubTextBackend(0), 0, tmp_path / "a.jsonl"))
        b = read_corpus(build_corpus(corpus_root, TAXONOMY, StubTextBackend(0), 1, tmp_path / "b.jsonl"))
        assert [e.view_id for e in a] != [e.view_id for e in b]

    def test_backend_failure_skips_entry(self, corpus_root, tmp_path, caplog):
        def fail_lamps(prompt):
            return TimeoutError("down") if "lamp" in prompt else StubTextBackend().ask(prompt)

        out = build_corpus(corpus_root, TAXONOMY, Scripted(fail_lamps), 0, tmp_path / "c.jsonl", policy=NO_WAIT)
        assert {e.category for e in read_corpus(out)} == {"chair"}
        assert "skipping" in caplog.text

    def test_cli(self, corpus_root, tmp_path):
        out = tmp_path / "cli.jsonl"
        assert main(["corpus", "build", "--root", str(corpus_root), "--out", str(out), "--backend", "stub",
                     "--seed", "7"]) == 0
        assert out.read_bytes() == build_corpus(corpus_root, TAXONOMY, StubTextBackend(7), 7,
                                                tmp_path / "api.jsonl").read_bytes()
