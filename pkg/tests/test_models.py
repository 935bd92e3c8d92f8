import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcnlab.models import (
    PrefixDiscriminator,
    TabularGenerator,
    ZeroWeightsError,
    disc_grad,
    disc_objective,
    disc_score,
    disc_update,
    gen_grad_logprob,
    gen_logprob,
    gen_sample,
    gen_sample_batch,
    gen_update_weighted,
    weighted_logprob_grad,
)
from gcnlab.seqspace import ExactDist, SpaceConfig, dirichlet_dist, enumerate_sequences

FD_STEP = 1e-5


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def random_disc(space, rng, scale=1.0):
    disc = PrefixDiscriminator(space)
    disc.phi[:] = rng.normal(scale=scale, size=disc.phi.shape)
    return disc


class TestGenerator:
    def test_vocab1_two_step_sequence(self):
        space = SpaceConfig.make(1, 2)
        eos = space.vocab.eos
        gen = TabularGenerator(space)
        # EOS is masked at the empty prefix, so the first step is certain.
        assert gen_logprob(gen, 0, (0, eos)) == pytest.approx(math.log(1.0) + math.log(0.5))

    def test_two_factor_uniform_logprob(self):
        space = SpaceConfig.make(2, 2)
        gen = TabularGenerator(space)
        assert gen_logprob(gen, 0, (0, space.vocab.eos)) == pytest.approx(math.log(0.5) + math.log(1 / 3))

    def test_single_sequence_space(self):
        gen = TabularGenerator(SpaceConfig.make(1, 1))
        assert gen_logprob(gen, 0, (0,)) == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_sums_to_one(self, seed):
        space = SpaceConfig.make(3, 3, 2)
        gen = TabularGenerator.random(space, np.random.default_rng(seed), 2.0)
        for ctx in range(2):
            total = sum(math.exp(gen_logprob(gen, ctx, y)) for y in enumerate_sequences(space))
            assert abs(total - 1) < 1e-9

    def test_vectorized_logprobs_match(self):
        space = SpaceConfig.make(2, 3)
        gen = TabularGenerator.random(space, np.random.default_rng(1))
        expected = [gen_logprob(gen, 0, y) for y in gen.index.sequences]
        np.testing.assert_allclose(gen.sequence_logprobs(0), expected, atol=1e-12)

    def test_from_distributions_realizes_target(self):
        space = SpaceConfig.make(2, 3, 2)
        rng = np.random.default_rng(4)
        dists = [dirichlet_dist(space, 0.7, rng) for _ in range(2)]
        gen = TabularGenerator.from_distributions(space, dists)
        for ctx, d in enumerate(dists):
            np.testing.assert_allclose(gen.distribution(ctx).probs, d.probs, atol=1e-12)

    def test_bad_context(self):
        gen = TabularGenerator(SpaceConfig.make(2, 2))
        with pytest.raises(KeyError):
            gen_logprob(gen, 3, (0, 0))

    def test_json_round_trip(self):
        space = SpaceConfig.make(2, 2, 2)
        gen = TabularGenerator.random(space, np.random.default_rng(0))
        back = TabularGenerator.from_json(space, gen.to_json())
        np.testing.assert_array_equal(back.logits, gen.logits)


class TestSampling:
    def test_frequencies_match_enumeration(self):
        space = SpaceConfig.make(2, 2)
        gen = TabularGenerator.random(space, np.random.default_rng(7))
        rng = np.random.default_rng(0)
        n = 100_000
        ys = [gen_sample(gen, 0, 1.0, rng) for _ in range(n)]
        counts = {y: 0 for y in gen.index.sequences}
        for y in ys:
            counts[y] += 1
        for y in gen.index.sequences:
            p = math.exp(gen_logprob(gen, 0, y))
            se = math.sqrt(p * (1 - p) / n)
            assert abs(counts[y] / n - p) < 3 * se + 1e-12

    def test_batch_sampler_frequencies(self):
        space = SpaceConfig.make(2, 2, 2)
        gen = TabularGenerator.random(space, np.random.default_rng(8))
        n = 50_000
        ys = gen_sample_batch(gen, np.ones(n, dtype=int), 1.0, np.random.default_rng(1))
        p = gen.distribution(1).probs
        freq = np.array([sum(y == s for y in ys) for s in gen.index.sequences]) / n
        se = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(freq - p) < 4 * se)

    def test_greedy_limit_is_modal(self):
        space = SpaceConfig.make(3, 2)
        seqs = enumerate_sequences(space)
        probs = np.full(len(seqs), 0.4 / (len(seqs) - 1))
        probs[7] = 0.6
        gen = TabularGenerator.from_distributions(space, [ExactDist.from_probs(seqs, probs)])
        rng = np.random.default_rng(0)
        assert gen_sample(gen, 0, 1e-9, rng) == seqs[7]
        assert gen_sample_batch(gen, [0, 0], 1e-9, rng) == [seqs[7], seqs[7]]

    def test_same_seed_same_sequence(self):
        gen = TabularGenerator.random(SpaceConfig.make(3, 3), np.random.default_rng(5))
        a = [gen_sample(gen, 0, 1.0, np.random.default_rng(11)) for _ in range(3)]
        b = [gen_sample(gen, 0, 1.0, np.random.default_rng(11)) for _ in range(3)]
        assert a == b

    def test_nonpositive_temperature(self):
        gen = TabularGenerator(SpaceConfig.make(2, 2))
        with pytest.raises(ValueError):
            gen_sample(gen, 0, 0.0, np.random.default_rng(0))


class TestGeneratorGradient:
    def test_rows_sum_to_zero(self):
        space = SpaceConfig.make(3, 3)
        gen = TabularGenerator.random(space, np.random.default_rng(0))
        g = gen_grad_logprob(gen, 0, (1, 2, 0))
        np.testing.assert_allclose(g.sum(axis=-1), 0.0, atol=1e-15)

    def test_uniform_two_symbols(self):
        space = SpaceConfig.make(2, 1)
        g = gen_grad_logprob(TabularGenerator(space), 0, (1,))
        np.testing.assert_allclose(g[0, 0], [-0.5, 0.5, 0.0])

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        space = SpaceConfig.make(int(rng.integers(1, 4)), int(rng.integers(1, 4)), 2)
        gen = TabularGenerator.random(space, rng, 1.5)
        seqs = gen.index.sequences
        y = seqs[int(rng.integers(len(seqs)))]
        ctx = int(rng.integers(2))
        analytic = gen_grad_logprob(gen, ctx, y)
        numeric = np.zeros_like(gen.logits)
        for i in np.ndindex(gen.logits.shape):
            if not gen.index.allowed[i[1], i[2]]:
                continue
            plus, minus = gen.copy(), gen.copy()
            plus.logits[i] += FD_STEP
            minus.logits[i] -= FD_STEP
            numeric[i] = (gen_logprob(plus, ctx, y) - gen_logprob(minus, ctx, y)) / (2 * FD_STEP)
        if np.linalg.norm(numeric) == 0:
            np.testing.assert_allclose(analytic, 0.0, atol=1e-12)
        else:
            assert rel_err(analytic, numeric) < 1e-4


class TestWeightedUpdate:
    def setup_method(self):
        self.space = SpaceConfig.make(2, 2)
        self.gen = TabularGenerator.random(self.space, np.random.default_rng(0))
        self.samples = [(0, (0, 1)), (0, (1, self.space.vocab.eos)), (0, (0, 1))]

    def test_equal_weights_give_mean_mle(self):
        step = weighted_logprob_grad(self.gen, self.samples, [3.0, 3.0, 3.0], True)
        mean = np.mean([gen_grad_logprob(self.gen, c, y) for c, y in self.samples], axis=0)
        np.testing.assert_allclose(step, mean, atol=1e-15)

    def test_mask_weights(self):
        two = self.samples[:2]
        step = weighted_logprob_grad(self.gen, two, [1.0, 0.0], True)
        np.testing.assert_allclose(step, gen_grad_logprob(self.gen, *two[0]), atol=1e-15)

    def test_unnormalized_is_raw_sum(self):
        step = weighted_logprob_grad(self.gen, self.samples, [1.0, 2.0, 0.5], False)
        expected = sum(w * gen_grad_logprob(self.gen, c, y) for w, (c, y) in zip([1.0, 2.0, 0.5], self.samples))
        np.testing.assert_allclose(step, expected, atol=1e-14)

    def test_zero_weights_error(self):
        with pytest.raises(ZeroWeightsError):
            gen_update_weighted(self.gen, self.samples, [0, 0, 0], 0.1, True)

    def test_update_keeps_normalization(self):
        new = gen_update_weighted(self.gen, self.samples, [1.0, 2.0, 0.5], 3.0, True)
        assert abs(new.distribution(0).probs.sum() - 1) < 1e-9
        assert new is not self.gen

    def test_snis_matches_enumerated_cooperative_gradient(self):
        space = SpaceConfig.make(2, 1)
        gen = TabularGenerator.random(space, np.random.default_rng(3))
        disc = random_disc(space, np.random.default_rng(4))
        p = gen.distribution(0).probs
        d = disc.sequence_scores(0)
        q = p * d / np.sum(p * d)
        exact = sum(qi * gen_grad_logprob(gen, 0, y) for qi, y in zip(q, gen.index.sequences))
        n = 100_000
        ys = gen_sample_batch(gen, np.zeros(n, dtype=int), 1.0, np.random.default_rng(5))
        w = np.array([d[gen.index.seq_index[y]] for y in ys])
        est = weighted_logprob_grad(gen, [(0, y) for y in ys], w, True)
        assert rel_err(est, exact) < 0.05


class TestDiscriminator:
    def test_scores(self):
        space = SpaceConfig.make(2, 2)
        disc = PrefixDiscriminator(space)
        assert disc_score(disc, 0, (0,)) == 0.5
        disc.phi[0, disc.index.disc_index[(0,)]] = 20.0
        assert abs(disc_score(disc, 0, (0,)) - 1) < 1e-8
        disc.phi[0, disc.index.disc_index[(1,)]] = math.log(3)
        assert disc_score(disc, 0, (1,)) == pytest.approx(0.75)

    def test_unseen_prefix_is_half(self):
        disc = PrefixDiscriminator(SpaceConfig.make(2, 2))
        assert disc_score(disc, 0, (5, 5)) == 0.5

    def test_identical_batches_fixed_point(self):
        space = SpaceConfig.make(2, 2)
        disc = PrefixDiscriminator(space)
        batch = [(0, (0, 1)), (0, (1, 0))]
        new = disc_update(disc, batch, batch, 0.7)
        np.testing.assert_array_equal(new.phi, disc.phi)

    def test_single_real_prefix(self):
        space = SpaceConfig.make(2, 1)
        disc = PrefixDiscriminator(space)
        new = disc_update(disc, [(0, (0,))], [], 1.0)
        assert new.phi[0, new.index.disc_index[(0,)]] == pytest.approx(0.5)

    def test_empty_batches_rejected(self):
        with pytest.raises(ValueError):
            disc_update(PrefixDiscriminator(SpaceConfig.make(2, 1)), [], [], 1.0)

    def test_sequence_scores_use_full_sequence(self):
        space = SpaceConfig.make(2, 2)
        disc = random_disc(space, np.random.default_rng(0))
        scores = disc.sequence_scores(0)
        for i, y in enumerate(disc.index.sequences):
            assert scores[i] == pytest.approx(disc_score(disc, 0, y))

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        space = SpaceConfig.make(2, 3, 2)
        disc = random_disc(space, rng)
        seqs = disc.index.sequences
        pick = lambda k: [(int(rng.integers(2)), seqs[int(rng.integers(len(seqs)))]) for _ in range(k)]
        reals, fakes = pick(5), pick(5)
        analytic = disc_grad(disc, reals, fakes)
        numeric = np.zeros_like(disc.phi)
        for i in np.ndindex(disc.phi.shape):
            plus, minus = disc.copy(), disc.copy()
            plus.phi[i] += FD_STEP
            minus.phi[i] -= FD_STEP
            numeric[i] = (disc_objective(plus, reals, fakes) - disc_objective(minus, reals, fakes)) / (2 * FD_STEP)
        assert rel_err(analytic, numeric) < 1e-4

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_small_step_increases_objective(self, seed):
        rng = np.random.default_rng(seed)
        space = SpaceConfig.make(2, 2)
        disc = random_disc(space, rng)
        seqs = disc.index.sequences
        reals = [(0, seqs[int(rng.integers(len(seqs)))]) for _ in range(4)]
        fakes = [(0, seqs[int(rng.integers(len(seqs)))]) for _ in range(4)]
        if np.linalg.norm(disc_grad(disc, reals, fakes)) < 1e-9:
            return
        new = disc_update(disc, reals, fakes, 1e-3)
        assert disc_objective(new, reals, fakes) > disc_objective(disc, reals, fakes)

    def test_json_round_trip(self):
        space = SpaceConfig.make(2, 2, 2)
        disc = random_disc(space, np.random.default_rng(1))
        back = PrefixDiscriminator.from_json(space, disc.to_json())
        np.testing.assert_array_equal(back.phi, disc.phi)


class TestDeterminism:
    def test_update_trajectory_bitwise(self):
        space = SpaceConfig.make(2, 2)

        def run():
            rng = np.random.default_rng(9)
            gen = TabularGenerator.random(space, rng)
            for _ in range(5):
                ys = gen_sample_batch(gen, np.zeros(32, dtype=int), 1.0, rng)
                gen = gen_update_weighted(gen, [(0, y) for y in ys], rng.random(32), 0.3, True)
            return gen.logits

        np.testing.assert_array_equal(run(), run())
