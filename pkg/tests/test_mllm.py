import math

import numpy as np
import pytest
import torch

from conftest import make_image, random_conversation
from oracles import expected_supervision

from weavegen import mllm
from weavegen.core import (
    ASSISTANT,
    USER,
    InputError,
    InterleavedSequence,
    TransformerDims,
    image_chunk,
    pixel_hash,
    text_chunk,
)


def stream_for(seq, images, vocab, patch=8, max_side=64):
    return mllm.tokenize(seq, vocab, patch, max_side, images)


class TestTokenize:
    def test_spec_masking_example(self, vocab):
        img = make_image(np.random.default_rng(0), 16, 16)  # 2x2 patches at patch 8
        ref = pixel_hash(img)
        seq = InterleavedSequence(
            id="s",
            chunks=(text_chunk(USER, "Hi"), text_chunk(ASSISTANT, "Ok"), image_chunk(ASSISTANT, ref)),
        )
        stream = stream_for(seq, {ref: img}, vocab)
        assert stream.loss_mask.tolist() == [0, 0, 1, 1, 1, 0, 0, 0, 0, 1]
        assert stream.ids[4] == vocab.bov_id
        assert int(stream.loss_mask.sum()) == 4

    def test_downscale_to_cap(self, vocab):
        img = make_image(np.random.default_rng(0), 96, 96)
        ref = pixel_hash(img)
        seq = InterleavedSequence(
            id="s", chunks=(text_chunk(USER, "q"), text_chunk(ASSISTANT, "a"), image_chunk(ASSISTANT, ref))
        )
        stream = stream_for(seq, {ref: img}, vocab, patch=8, max_side=64)
        span = stream.image_token_spans[0]
        assert (span.height_px, span.width_px) == (64, 64)
        assert span.end - span.start == 64

    def test_text_only_has_no_bov(self, vocab):
        seq = InterleavedSequence(
            id="s", chunks=(text_chunk(USER, "hello there"), text_chunk(ASSISTANT, "hi"))
        )
        stream = stream_for(seq, {}, vocab)
        assert vocab.bov_id not in stream.ids
        assert stream.ids[-1] == vocab.eos_id

    def test_user_image_gets_no_bov_or_loss(self, vocab):
        img = make_image(np.random.default_rng(1), 8, 8)
        ref = pixel_hash(img)
        seq = InterleavedSequence(
            id="s", chunks=(image_chunk(USER, ref), text_chunk(USER, "what?"), text_chunk(ASSISTANT, "a cat"))
        )
        stream = stream_for(seq, {ref: img}, vocab)
        assert vocab.bov_id not in stream.ids
        span = stream.image_token_spans[0]
        assert stream.loss_mask[span.start : span.end].sum() == 0

    def test_spans_partition_stream(self, vocab):
        rng = np.random.default_rng(5)
        for _ in range(20):
            seq, images = random_conversation(rng, vocab)
            stream = stream_for(seq, images, vocab)
            spans = sorted(stream.chunk_spans, key=lambda s: s.start)
            assert spans[0].start == 0
            assert spans[-1].end == len(stream)
            for a, b in zip(spans, spans[1:]):
                assert a.end == b.start
            assert spans[-1].kind == mllm.EOS_KIND
            assert spans[-1].chunk_index == len(seq.chunks)

    def test_invalid_sequence_rejected(self, vocab):
        seq = InterleavedSequence(id="s", chunks=())
        with pytest.raises(InputError, match="sequence empty"):
            stream_for(seq, {}, vocab)

    def test_missing_image_rejected(self, vocab):
        seq = InterleavedSequence(id="s", chunks=(text_chunk(USER, "x"), image_chunk(USER, "nope")))
        with pytest.raises(InputError, match="not provided"):
            stream_for(seq, {}, vocab)

    def test_unencodable_text_rejected(self, vocab):
        seq = InterleavedSequence(id="s", chunks=(text_chunk(USER, "\ud800"),))
        with pytest.raises(InputError, match="unencodable"):
            stream_for(seq, {}, vocab)

    def test_loss_mask_oracle_100_random_conversations(self, vocab):
        rng = np.random.default_rng(42)
        for _ in range(100):
            seq, images = random_conversation(rng, vocab)
            stream = stream_for(seq, images, vocab)
            sizes = {ref: (px.shape[0], px.shape[1]) for ref, px in images.items()}
            want, want_len = expected_supervision(seq, sizes, patch=8, max_side=64)
            assert len(stream) == want_len
            got = set(np.flatnonzero(stream.loss_mask).tolist())
            assert got == want


class TestScaledSize:
    def test_no_upscale(self):
        assert mllm.scaled_size(30, 40, 64) == (30, 40)

    def test_cap_long_side(self):
        assert mllm.scaled_size(96, 96, 64) == (64, 64)
        assert mllm.scaled_size(128, 64, 64) == (64, 32)

    def test_never_zero(self):
        h, w = mllm.scaled_size(1000, 3, 64)
        assert h == 64 and w >= 1


class TestForward:
    @pytest.fixture
    def setup(self, vocab):
        rng = np.random.default_rng(3)
        img = make_image(rng, 16, 16)
        ref = pixel_hash(img)
        seq = InterleavedSequence(
            id="s",
            chunks=(
                text_chunk(USER, "draw me a map"),
                text_chunk(ASSISTANT, "sure"),
                image_chunk(ASSISTANT, ref),
                text_chunk(ASSISTANT, "done"),
            ),
        )
        stream = stream_for(seq, {ref: img}, vocab)
        torch.manual_seed(0)
        lm = mllm.MultimodalLM(vocab, TransformerDims(2, 32, 4), patch=8)
        return lm, stream, [img]

    def test_output_shapes(self, setup, vocab):
        lm, stream, pixels = setup
        logits, hidden = lm(stream, pixels)
        assert logits.shape == (len(stream), vocab.vocab_size)
        assert hidden.values.shape == (2, len(stream), 32)
        assert hidden.valid_prefix_len == len(stream)

    def test_causality_perturbation(self, setup):
        lm, stream, pixels = setup
        t = 4
        logits_a, _ = lm(stream, pixels)
        ids = stream.ids.copy()
        ids[t + 1] = (ids[t + 1] + 1) % 256
        perturbed = mllm.TokenStream(
            ids=ids, loss_mask=stream.loss_mask, chunk_spans=stream.chunk_spans,
            image_token_spans=stream.image_token_spans,
        )
        logits_b, _ = lm(perturbed, pixels)
        assert torch.equal(logits_a[: t + 1], logits_b[: t + 1])
        assert not torch.equal(logits_a[t + 1 :], logits_b[t + 1 :])

    def test_causality_jacobian_exact_zero(self, vocab):
        # gradient of logits[t] w.r.t. a later position's embedding is exactly 0
        torch.manual_seed(1)
        lm = mllm.MultimodalLM(vocab, TransformerDims(1, 16, 2), patch=8, dtype=torch.float64)
        seq = InterleavedSequence(id="s", chunks=(text_chunk(USER, "abcd"), text_chunk(ASSISTANT, "ef")))
        stream = stream_for(seq, {}, vocab)
        x = lm.embed_stream(stream, []).detach().requires_grad_(True)
        h = x
        for block in lm.blocks:
            h = block(h)
        logits = lm.lm_head(lm.norm(h))
        logits[2].sum().backward()
        assert torch.all(x.grad[3:] == 0)
        assert torch.any(x.grad[: 3] != 0)

    def test_pixel_count_mismatch(self, setup):
        lm, stream, _ = setup
        with pytest.raises(InputError, match="pixel"):
            lm(stream, [])

    def test_finiteness_sweep_100_seeds(self, vocab):
        rng = np.random.default_rng(9)
        img = make_image(rng, 16, 16)
        ref = pixel_hash(img)
        seq = InterleavedSequence(
            id="s", chunks=(text_chunk(USER, "go"), text_chunk(ASSISTANT, "ok"), image_chunk(ASSISTANT, ref))
        )
        stream = stream_for(seq, {ref: img}, vocab)
        for seed in range(100):
            torch.manual_seed(seed)
            lm = mllm.MultimodalLM(vocab, TransformerDims(1, 16, 2), patch=8)
            logits, hidden = lm(stream, [img])
            assert torch.isfinite(logits).all()
            assert torch.isfinite(hidden.values).all()


class TestNtpLoss:
    def make(self, vocab, text_user="ab", text_asst="cd"):
        seq = InterleavedSequence(
            id="s", chunks=(text_chunk(USER, text_user), text_chunk(ASSISTANT, text_asst))
        )
        return stream_for(seq, {}, vocab)

    def test_one_hot_logits_drive_loss_to_zero(self, vocab):
        stream = self.make(vocab)
        logits = torch.zeros(len(stream), vocab.vocab_size)
        for t in range(1, len(stream)):
            logits[t - 1, stream.ids[t]] = 1e4
        assert mllm.ntp_loss(logits, stream).item() < 1e-6

    def test_uniform_logits_give_log_vocab(self, vocab):
        stream = self.make(vocab)
        logits = torch.zeros(len(stream), vocab.vocab_size)
        loss = mllm.ntp_loss(logits, stream)
        assert math.isclose(loss.item(), math.log(vocab.vocab_size), rel_tol=1e-6)

    def test_masked_positions_do_not_matter(self, vocab):
        stream = self.make(vocab)
        logits = torch.randn(len(stream), vocab.vocab_size)
        base = mllm.ntp_loss(logits, stream).item()
        garbage = logits.clone()
        # positions whose *next* token is unsupervised can hold anything
        supervised = set(mllm.supervised_positions(stream))
        for t in range(len(stream) - 1):
            if (t + 1) not in supervised:
                garbage[t] = torch.randn(vocab.vocab_size) * 100
        assert mllm.ntp_loss(garbage, stream).item() == pytest.approx(base, rel=1e-6)

    def test_all_masked_warns_and_returns_zero(self, vocab):
        seq = InterleavedSequence(id="s", chunks=(text_chunk(USER, "just user"),))
        stream = stream_for(seq, {}, vocab)
        stream.loss_mask[:] = 0
        logits = torch.randn(len(stream), vocab.vocab_size)
        with pytest.warns(mllm.MaskWarning):
            loss = mllm.ntp_loss(logits, stream)
        assert loss.item() == 0.0

    def test_length_mismatch(self, vocab):
        stream = self.make(vocab)
        with pytest.raises(InputError):
            mllm.ntp_loss(torch.zeros(3, vocab.vocab_size), stream)


class TestDecodeStep:
    def test_temperature_zero_is_argmax(self, vocab):
        torch.manual_seed(2)
        lm = mllm.MultimodalLM(vocab, TransformerDims(1, 16, 2), patch=8)
        seq = InterleavedSequence(id="s", chunks=(text_chunk(USER, "abc"),))
        stream = stream_for(seq, {}, vocab)
        logits, _ = lm(stream, [])
        assert lm.decode_step(stream, []) == int(torch.argmax(logits[-1]))

    def test_fixed_seed_reproduces_sampled_tokens(self, vocab):
        torch.manual_seed(2)
        lm = mllm.MultimodalLM(vocab, TransformerDims(1, 16, 2), patch=8)
        seq = InterleavedSequence(id="s", chunks=(text_chunk(USER, "abc"),))
        stream = stream_for(seq, {}, vocab)

        def roll(seed):
            g = torch.Generator().manual_seed(seed)
            return [lm.decode_step(stream, [], temperature=1.0, generator=g) for _ in range(8)]

        assert roll(123) == roll(123)
        assert roll(123) != roll(321)


class TestGradientCheck:
    def test_ntp_gradients_match_finite_differences(self, vocab):
        from oracles import finite_difference_grads, max_relative_grad_error

        torch.manual_seed(4)
        lm = mllm.MultimodalLM(vocab, TransformerDims(1, 8, 2), patch=4, dtype=torch.float64)
        rng = np.random.default_rng(0)
        img = make_image(rng, 8, 8)
        ref = pixel_hash(img)
        seq = InterleavedSequence(
            id="s", chunks=(text_chunk(USER, "ab"), text_chunk(ASSISTANT, "cd"), image_chunk(ASSISTANT, ref))
        )
        stream = stream_for(seq, {ref: img}, vocab, patch=4)

        def loss_fn():
            logits, _ = lm(stream, [img])
            return mllm.ntp_loss(logits, stream)

        loss = loss_fn()
        params = [p for p in lm.parameters()]
        analytic = torch.autograd.grad(loss, params)
        fd = finite_difference_grads(loss_fn, params)
        assert max_relative_grad_error(list(analytic), fd) < 1e-4
