import json

import numpy as np
import pytest
from PIL import Image

from weavegen.bundle import build_bundle
from weavegen.core import (
    ASSISTANT,
    USER,
    InputError,
    InterleavedSequence,
    RunConfig,
    TransformerDims,
    image_chunk,
    text_chunk,
)
from weavegen.dataengine import MockEngineClient
from weavegen.dataengine.client import MockChatClient
from weavegen.evalsuite import (
    Rubric,
    SampleJudgment,
    aggregate,
    default_rubric,
    judge_sample,
    load_benchmark,
    run_benchmark,
)
from weavegen.pipeline import GenerationBudget


def generated_sequence(n_images=2):
    chunks = [text_chunk(USER, "show me how to fold a crane")]
    chunks.append(text_chunk(ASSISTANT, "start with a square sheet"))
    for k in range(n_images):
        chunks.append(image_chunk(ASSISTANT, f"hash{k}"))
    return InterleavedSequence(id="gen0", chunks=tuple(chunks))


def scripted_judge(payloads):
    """Judge returning each payload (dict or raw string) in turn."""
    queue = list(payloads)

    def handler(request):
        item = queue.pop(0)
        return item if isinstance(item, str) else json.dumps(item)

    return MockChatClient(handler)


def full_scores(seq_val=4, img_val=5, n_images=2):
    return {
        "T-Com": seq_val,
        "I-Com": 5,
        "I-Co": 3,
        "per_image": [{"IT-Co": img_val, "I-Q": img_val} for _ in range(n_images)],
    }


class TestRubric:
    def test_partition_enforced(self):
        with pytest.raises(InputError):
            Rubric(metric_names=("a", "b"), scale=(1, 5), per_image=("a",), per_sequence=("a",))
        with pytest.raises(InputError):
            Rubric(metric_names=("a", "b"), scale=(1, 5), per_image=("a",), per_sequence=())

    def test_comm_style_rubric_is_pure_config(self):
        rubric = Rubric(
            metric_names=("Sty.", "Enti.", "Tren.", "Comp.", "ImgQ", "IRS"),
            scale=(0, 10),
            per_sequence=("Sty.", "Enti.", "Tren.", "Comp.", "IRS"),
            per_image=("ImgQ",),
        )
        judge = scripted_judge(
            [{"Sty.": 9, "Enti.": 9, "Tren.": 9, "Comp.": 10, "IRS": 8, "per_image": [{"ImgQ": 10}, {"ImgQ": 9}]}]
        )
        out = judge_sample(generated_sequence(), rubric, judge)
        assert out.judged and out.scores["ImgQ"] == 9.5

    def test_from_file(self, tmp_path):
        path = tmp_path / "rubric.json"
        path.write_text(
            json.dumps(
                {
                    "metric_names": ["X", "Y"],
                    "scale": [1, 5],
                    "per_sequence": ["X"],
                    "per_image": ["Y"],
                }
            )
        )
        rubric = Rubric.from_file(path)
        assert rubric.metric_names == ("X", "Y")


class TestJudgeSample:
    def test_mock_scores_stored_verbatim(self):
        judge = scripted_judge([full_scores()])
        out = judge_sample(generated_sequence(), default_rubric(), judge)
        assert out.judged
        assert out.scores == {"T-Com": 4.0, "I-Com": 5.0, "I-Co": 3.0, "IT-Co": 5.0, "I-Q": 5.0}

    def test_out_of_scale_rejected_then_retried(self):
        bad = full_scores()
        bad["T-Com"] = 7
        judge = scripted_judge([bad, full_scores()])
        out = judge_sample(generated_sequence(), default_rubric(), judge)
        assert out.judged
        assert out.scores["T-Com"] == 4.0
        assert judge.call_count == 2
        assert "outside scale" in out.transcript[0]["violation"]

    def test_malformed_reply_retries_then_unjudged(self):
        judge = scripted_judge(["word salad"] * 3)
        out = judge_sample(generated_sequence(), default_rubric(), judge, max_retries=2)
        assert not out.judged
        assert len(out.transcript) == 3

    def test_per_image_length_must_match(self):
        short = full_scores()
        short["per_image"] = short["per_image"][:1]
        judge = scripted_judge([short, full_scores()])
        out = judge_sample(generated_sequence(n_images=2), default_rubric(), judge)
        assert out.judged and judge.call_count == 2

    def test_no_generated_images_skips_image_metrics(self):
        judge = scripted_judge([{"T-Com": 4, "I-Com": 1, "I-Co": 1, "per_image": []}])
        out = judge_sample(generated_sequence(n_images=0), default_rubric(), judge)
        assert out.judged
        assert "I-Q" not in out.scores

    def test_request_embeds_prompt_text_and_images(self):
        judge = scripted_judge([full_scores()])
        judge_sample(generated_sequence(), default_rubric(), judge)
        request = judge.calls[0]
        parts = request.messages[-1].content
        image_parts = [p for p in parts if p["type"] == "image_ref"]
        text_part = next(p for p in parts if p["type"] == "text")
        payload = json.loads(text_part["text"])
        assert len(image_parts) == 2
        assert "fold a crane" in payload["user_prompt"]
        assert "square sheet" in payload["generated_text"]


class TestAggregate:
    def j(self, sid, judged=True, **scores):
        return SampleJudgment(sample_id=sid, judged=judged, scores=scores)

    def test_arithmetic_mean(self):
        report = aggregate([self.j("a", x=4), self.j("b", x=5), self.j("c", x=3)])
        assert report.per_metric_mean["x"] == 4.0
        assert report.per_metric_count["x"] == 3

    def test_unjudged_excluded(self):
        report = aggregate([self.j("a", x=4), self.j("b", judged=False)])
        assert report.per_metric_mean["x"] == 4.0
        assert report.judged == 1 and report.total == 2

    def test_nothing_judged_errors(self):
        with pytest.raises(InputError, match="nothing judged"):
            aggregate([self.j("a", judged=False)])

    def test_single_sample_identity(self):
        report = aggregate([self.j("a", x=2.0, y=5.0)])
        assert report.per_metric_mean == {"x": 2.0, "y": 5.0}


class TestBenchmarks:
    def write_manifest(self, tmp_path, name, n, with_images=False):
        rows = []
        for i in range(n):
            row = {"id": f"{name}-{i:03d}", "prompt": f"how to do thing {i}?"}
            if with_images:
                img = (np.random.default_rng(i).random((16, 16, 3)) * 255).astype("uint8")
                fname = f"{name}-{i}.png"
                Image.fromarray(img).save(tmp_path / fname)
                row["image"] = fname
            rows.append(row)
        with open(tmp_path / f"{name}.jsonl", "w") as f:
            for row in rows:
                f.write(json.dumps(row) + "\n")

    def test_load_counts(self, tmp_path):
        self.write_manifest(tmp_path, "cooking-desk", 20, with_images=True)
        self.write_manifest(tmp_path, "howto-desk", 50)
        assert len(load_benchmark("cooking-desk", tmp_path)) == 20
        assert len(load_benchmark("howto-desk", tmp_path)) == 50

    def test_missing_manifest_errors(self, tmp_path):
        with pytest.raises(InputError, match="not found"):
            load_benchmark("nope", tmp_path)

    def test_manifest_from_expanded_pool(self, tmp_path):
        from weavegen.evalsuite import manifest_from_pool

        pool = tmp_path / "pool.jsonl"
        with open(pool, "w") as f:
            for i in range(6):
                split = "holdout" if i % 2 else "train"
                f.write(json.dumps({"prompt": f"q{i}", "split": split, "subcategory": "s"}) + "\n")
        n = manifest_from_pool(pool, tmp_path / "howto-desk.jsonl")
        assert n == 3
        prompts = load_benchmark("howto-desk", tmp_path)
        assert [p.text for p in prompts] == ["q1", "q3", "q5"]
        with pytest.raises(InputError, match="no 'nope' prompts"):
            manifest_from_pool(pool, tmp_path / "x.jsonl", split="nope")

    def test_run_benchmark_end_to_end_with_mock_judge(self, tmp_path):
        self.write_manifest(tmp_path, "mini", 3, with_images=True)
        cfg = RunConfig(
            seed=0,
            latent_patch=8,
            lm_dims=TransformerDims(1, 16, 2),
            dit_dims=TransformerDims(1, 12, 2),
            sampler_steps=2,
            mllm_max_side_px=64,
        )
        bundle = build_bundle(cfg)
        budget = GenerationBudget(
            max_text_tokens=16, max_images=1, image_shape=(16, 16), cfg_scale=1.0, steps=2, seed=0
        )
        judge = MockEngineClient()  # canned judge behaviour: mid-scale scores
        out_dir = tmp_path / "report"
        report = run_benchmark(
            bundle, load_benchmark("mini", tmp_path), budget, judge, default_rubric(), out_dir=out_dir
        )
        assert report.total == 3 and report.judged == 3
        assert (out_dir / "report.json").exists()
        assert len(list((out_dir / "transcripts").glob("*.json"))) == 3
        saved = json.loads((out_dir / "report.json").read_text())
        assert saved["judged"] == 3
