import numpy as np
import pytest
import torch
from PIL import Image

from diffstyle.config import validate_config
from diffstyle.errors import MetricUnavailableError
from diffstyle.evaluation import (BenchmarkResult, benchmark, build_report,
                                  clip_score, evaluate_image, identity_distance)
from diffstyle.pipeline import StyleTask
from diffstyle.style import PatchPolicy, PromptPair, global_clip_loss

from conftest import rand_image


class FakeEmbedder:
    image_size = 8

    def __init__(self, text_vectors):
        self.text_vectors = text_vectors

    def embed_image(self, x):
        single = x.dim() == 3
        xb = x[None] if single else x
        emb = xb.mean(dim=(-1, -2))
        emb = emb / torch.linalg.vector_norm(emb, dim=-1, keepdim=True)
        return emb[0] if single else emb

    def embed_text(self, text):
        vec = torch.tensor(self.text_vectors[text], dtype=torch.float64)
        return vec / torch.linalg.vector_norm(vec)


def const_image(values, size=8):
    return torch.tensor(values, dtype=torch.float64)[:, None, None] \
        .expand(3, size, size).clone()


class TestClipScore:
    def test_identical_embeddings_score_one(self):
        emb = FakeEmbedder({"style": [1.0, 0.0, 0.0]})
        assert abs(clip_score(const_image([2.0, 0.0, 0.0]), "style", emb) - 1.0) < 1e-12

    def test_orthogonal_embeddings_score_zero(self):
        emb = FakeEmbedder({"style": [0.0, 1.0, 0.0]})
        assert abs(clip_score(const_image([1.0, 0.0, 0.0]), "style", emb)) < 1e-12

    def test_whole_image_score_is_one_minus_loss(self, stub_embedder):
        x = rand_image(1, size=16, dtype=torch.float32)
        score = clip_score(x, "golden", stub_embedder)
        loss = global_clip_loss(x, "golden", stub_embedder).item()
        assert abs(score - (1.0 - loss)) <= 1e-6

    def test_patch_score_is_deterministic_given_rng(self, stub_embedder):
        x = rand_image(2, size=32, dtype=torch.float32)
        policy = PatchPolicy(n_patches=8, scale_range=(0.2, 0.8), augment=True)
        a = clip_score(x, "golden", stub_embedder, policy=policy,
                       rng=np.random.default_rng(4))
        b = clip_score(x, "golden", stub_embedder, policy=policy,
                       rng=np.random.default_rng(4))
        assert a == b


class TestIdentityDistance:
    def test_same_image_zero(self, stub_embedder):
        x = rand_image(1, size=16, dtype=torch.float32)
        assert abs(identity_distance(x, x, stub_embedder)) <= 1e-6

    def test_opposed_embeddings_give_two(self):
        emb = FakeEmbedder({})
        a = const_image([1.0, 0.0, 0.0])
        b = const_image([-1.0, 0.0, 0.0])
        assert abs(identity_distance(a, b, emb) - 2.0) < 1e-12

    def test_unregistered_adapter_is_explicit_error(self):
        with pytest.raises(MetricUnavailableError):
            identity_distance(torch.zeros(3, 8, 8), torch.zeros(3, 8, 8), None)


class TestReport:
    def test_aggregates_match_recomputed_means(self, stub_embedder):
        policy = PatchPolicy(n_patches=4, scale_range=(0.3, 0.9), augment=False)
        rows = [
            evaluate_image(f"img{i}", rand_image(i, size=16, dtype=torch.float32),
                           "golden", stub_embedder, policy,
                           rng=np.random.default_rng(i), seconds=float(i))
            for i in range(4)
        ]
        report = build_report(rows)
        want = sum(r.clip_global for r in rows) / 4
        assert abs(report.aggregates["clip_global_mean"] - want) <= 1e-12
        want_patch = sum(r.clip_patch for r in rows) / 4
        assert abs(report.aggregates["clip_patch_mean"] - want_patch) <= 1e-12

    def test_identity_marked_unavailable_without_adapter(self, stub_embedder):
        policy = PatchPolicy(n_patches=2, scale_range=(0.5, 1.0), augment=False)
        row = evaluate_image("a", rand_image(1, size=16, dtype=torch.float32),
                             "golden", stub_embedder, policy,
                             rng=np.random.default_rng(0))
        assert row.identity_distance is None
        report = build_report([row])
        assert report.aggregates["identity_mean"] is None
        text = report.to_text()
        assert "unavailable" in text

    def test_identity_column_filled_with_adapter(self, stub_embedder):
        policy = PatchPolicy(n_patches=2, scale_range=(0.5, 1.0), augment=False)
        x = rand_image(2, size=16, dtype=torch.float32)
        row = evaluate_image("a", x, "golden", stub_embedder, policy,
                             x_ref=x, face_embedder=stub_embedder,
                             rng=np.random.default_rng(0))
        assert row.identity_distance is not None
        assert abs(row.identity_distance) <= 1e-6

    def test_report_text_shape(self, stub_embedder):
        policy = PatchPolicy(n_patches=2, scale_range=(0.5, 1.0), augment=False)
        rows = [evaluate_image("x", rand_image(3, size=16, dtype=torch.float32),
                               "golden", stub_embedder, policy,
                               rng=np.random.default_rng(0))]
        text = build_report(rows).to_text()
        lines = text.strip().splitlines()
        assert lines[0].startswith("image_id\t")
        assert lines[1].startswith("x\t")
        assert "# aggregates" in lines


class TestBenchmark:
    @pytest.fixture()
    def tiny_task(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, size=(16, 16, 3),
                                                dtype=np.uint8)
        src = tmp_path / "src.png"
        Image.fromarray(arr).save(src)
        return StyleTask(source_image_path=str(src),
                         output_path=str(tmp_path / "out.png"),
                         prompts=PromptPair("", "golden"), seed=0)

    def _config(self, T_prime, t0):
        return validate_config(f"""
[sampler]
forward_mode = ddim_deterministic
reverse_mode = ddim
eta = 0
T_prime = {T_prime}
t0_index = {t0}
[weights]
clip_global = 0
clip_directional = 0
zecon = 0
mse = 0
vgg = 0
[model]
image_size = 16
base_channels = 4
depth = 2
""")

    def test_smoke_and_statistics(self, tiny_task):
        result = benchmark(tiny_task, self._config(10, 5), repetitions=3)
        assert len(result.times) == 3
        assert result.spread[0] <= result.median <= result.spread[1]

    def test_more_steps_take_longer(self, tiny_task):
        fast = benchmark(tiny_task, self._config(10, 5), repetitions=3)
        slow = benchmark(tiny_task, self._config(40, 20), repetitions=3)
        assert slow.median > fast.median

    def test_rejects_zero_repetitions(self, tiny_task):
        with pytest.raises(ValueError):
            benchmark(tiny_task, self._config(10, 5), repetitions=0)

    def test_result_statistics(self):
        r = BenchmarkResult(times=[3.0, 1.0, 2.0])
        assert r.median == 2.0
        assert r.spread == (1.0, 3.0)
