import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dinolab.encoder import ConfigurationError, FeatureStack, LayerTokens
from dinolab.objective import (
    SCHEMES,
    GroupingScheme,
    LooseLossConfig,
    build_groups,
    discard_rate,
    easy_token_mask,
    global_cosine,
    loose_loss,
    make_scheme,
    plain_cosine_loss,
    token_distances,
)
from oracles import central_difference_grad

SELECTED = (3, 4, 5, 6, 7, 8, 9, 10)


class TestSchemes:
    def test_group2(self):
        s = make_scheme("group2", SELECTED)
        assert s.encoder_sets == ((3, 4, 5, 6), (7, 8, 9, 10))
        # block j targets the j-th deepest layer
        assert s.decoder_sets == ((5, 6, 7, 8), (1, 2, 3, 4))

    def test_group1(self):
        s = make_scheme("group1", SELECTED)
        assert s.encoder_sets == (SELECTED,) and s.decoder_sets == (tuple(range(1, 9)),)

    def test_group4(self):
        assert make_scheme("group4", SELECTED).encoder_sets == ((3, 4), (5, 6), (7, 8), (9, 10))

    def test_dense(self):
        s = make_scheme("layer2layer_dense", SELECTED)
        assert len(s.encoder_sets) == 8
        assert dict(zip([e[0] for e in s.encoder_sets], [d[0] for d in s.decoder_sets]))[10] == 1

    def test_sparse_and_last(self):
        assert make_scheme("layer2layer_sparse2", SELECTED).encoder_sets == ((4,), (6,), (8,), (10,))
        assert make_scheme("layer2layer_sparse4", SELECTED).encoder_sets == ((6,), (10,))
        s = make_scheme("layer2layer_last1", SELECTED)
        assert s.encoder_sets == ((10,),) and s.decoder_sets == ((1,),)

    @pytest.mark.parametrize("mode", SCHEMES)
    def test_all_valid(self, mode):
        make_scheme(mode, SELECTED).validate(SELECTED, 8)

    def test_unknown(self):
        with pytest.raises(ConfigurationError):
            make_scheme("group3", SELECTED)

    def test_overlap_rejected(self):
        bad = GroupingScheme("x", ((3, 4), (4, 5)), ((1,), (2,)))
        with pytest.raises(ConfigurationError):
            bad.validate(SELECTED, 8)

    def test_count_mismatch(self):
        with pytest.raises(ConfigurationError):
            GroupingScheme("x", ((3,), (4,)), ((1,),)).validate(SELECTED, 8)

    def test_block_count_mismatch(self):
        with pytest.raises(ConfigurationError):
            make_scheme("group2", SELECTED, num_blocks=6)


def _stack(n=4, d=3, batch=2):
    torch.manual_seed(0)
    return FeatureStack({i: LayerTokens(torch.zeros(batch, d), torch.randn(batch, n, d)) for i in SELECTED},
                        (1, n), recentered=True)


class TestBuildGroups:
    def test_group2_sums(self):
        stack = _stack()
        decoded = [torch.full((2, 4, 3), float(j)) for j in range(1, 9)]
        pairs = build_groups(stack, decoded, make_scheme("group2", SELECTED))
        assert len(pairs) == 2
        g0, gh0 = pairs[0]
        assert torch.allclose(g0, sum(stack.layers[i].patches for i in (3, 4, 5, 6)))
        assert torch.equal(gh0, torch.full((2, 4, 3), 5.0 + 6 + 7 + 8))

    def test_group1_and_dense_counts(self):
        stack, decoded = _stack(), [torch.zeros(2, 4, 3)] * 8
        assert len(build_groups(stack, decoded, make_scheme("group1", SELECTED))) == 1
        assert len(build_groups(stack, decoded, make_scheme("layer2layer_dense", SELECTED))) == 8


class TestDiscardRate:
    def test_values(self):
        assert discard_rate(0) == 0.0
        assert discard_rate(500) == 0.45
        assert discard_rate(1000) == 0.9
        assert discard_rate(50_000) == 0.9

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            LooseLossConfig(discard_rate_final=1.0)
        with pytest.raises(ConfigurationError):
            LooseLossConfig(grad_scale=0.0)


class TestLosses:
    def test_identical_is_zero(self):
        g = torch.randn(2, 5, 4)
        assert plain_cosine_loss([(g, g.clone())]).item() == pytest.approx(0.0, abs=1e-7)

    def test_orthogonal_is_one(self):
        g = torch.zeros(1, 2, 2)
        g[0, :, 0] = 1
        h = torch.zeros(1, 2, 2)
        h[0, :, 1] = 1
        assert plain_cosine_loss([(g, h)]).item() == pytest.approx(1.0)

    def test_antiparallel_is_two(self):
        g = torch.randn(2, 5, 4)
        assert plain_cosine_loss([(g, -g)]).item() == pytest.approx(2.0)

    def test_zero_norm_distance_one(self):
        g = torch.zeros(1, 3, 4)
        assert global_cosine(g, torch.randn(1, 3, 4)).item() == 1.0
        assert token_distances(g, g).eq(1.0).all()

    def test_global_not_tokenwise(self):
        # one orthogonal token out of many barely moves the flattened cosine
        g = torch.ones(1, 10, 2)
        h = g.clone()
        h[0, 0] = torch.tensor([1.0, -1.0])
        assert global_cosine(g, h).item() == pytest.approx(0.1)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.integers(0, 2000))
    def test_forward_equals_plain(self, seed, it):
        torch.manual_seed(seed)
        pairs = [(torch.randn(3, 6, 5), torch.randn(3, 6, 5)) for _ in range(2)]
        a, b = loose_loss(pairs, it).item(), plain_cosine_loss(pairs).item()
        assert abs(a - b) <= 1e-7
        assert 0.0 <= a <= 2.0

    def test_plain_gradient_matches_central_differences(self):
        torch.manual_seed(3)
        g = torch.randn(2, 3, 4, dtype=torch.float64)
        h = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
        plain_cosine_loss([(g, h)]).backward()
        numeric = central_difference_grad(lambda x: plain_cosine_loss([(g, x)]), h.detach().clone())
        assert ((h.grad - numeric).norm() / numeric.norm()).item() <= 1e-4

    def test_errors(self):
        with pytest.raises(ValueError):
            loose_loss([], 0)
        with pytest.raises(ValueError):
            loose_loss([(torch.ones(1, 1, 2), torch.ones(1, 1, 2))], -1)


class TestGradientModulation:
    def _grads(self, iteration, seed=0, shape=(4, 16, 8)):
        torch.manual_seed(seed)
        g = torch.randn(*shape, dtype=torch.float64)
        h = (g + 0.7 * torch.randn(*shape, dtype=torch.float64)).requires_grad_()
        loose_loss([(g, h)], iteration).backward()
        loose = h.grad.clone()
        h.grad = None
        plain_cosine_loss([(g, h)]).backward()
        dist = token_distances(g, h.detach())
        return loose, h.grad.clone(), dist

    def test_ratio_on_easy_tokens(self):
        loose, plain, dist = self._grads(2000)
        easy = easy_token_mask(dist, 0.9)
        ratio = loose.norm(dim=-1) / plain.norm(dim=-1)
        assert (ratio[easy] - 0.1).abs().max().item() <= 1e-6
        assert (ratio[~easy] - 1.0).abs().max().item() <= 1e-6

    @pytest.mark.parametrize("iteration", [0, 137, 500, 999, 1000, 5000])
    def test_fraction_tracks_schedule(self, iteration):
        loose, plain, _ = self._grads(iteration, seed=iteration)
        ratio = loose.norm(dim=-1) / plain.norm(dim=-1)
        scaled = int(((ratio - 0.1).abs() < 1e-6).sum())
        total = ratio.numel()
        assert abs(scaled - discard_rate(iteration) * total) <= 1

    def test_easy_tokens_are_smallest(self):
        _, _, dist = self._grads(1000)
        easy = easy_token_mask(dist, 0.9)
        assert dist[easy].max() <= dist[~easy].min()

    def test_ties_resolved_by_index(self):
        m = easy_token_mask(torch.zeros(1, 10), 0.35)
        assert m.tolist() == [[True, True, True] + [False] * 7]

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 300), st.floats(0, 0.99))
    def test_easy_count(self, n, rate):
        assert int(easy_token_mask(torch.rand(n), rate).sum()) == math.floor(rate * n + 1e-9)
