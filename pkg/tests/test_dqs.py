import numpy as np
import pytest
import torch

from api_models import DQSConfig, ModelConfig
from dqs import DiscerningQuerySelector, aggregate, positions_to_coords, scores_from_logits, select_topk
from errors import CapacityError, DimensionError, InputError
from model import GEMModel, preset_config


def pyramid_maps(value3=0.0, value4=0.0, value5=0.0, d=4, h=4):
    c3 = torch.full((1, d, 2 * h, 2 * h), value3)
    c4 = torch.full((1, d, h, h), value4)
    c5 = torch.full((1, d, h // 2, h // 2), value5)
    return c3, c4, c5


def test_zero_neighbours_leave_c4_unchanged():
    c3, _, c5 = pyramid_maps()
    c4 = torch.randn(1, 4, 4, 4)
    assert torch.equal(aggregate(c3, c4, c5), c4)


def test_all_zero_pyramid_aggregates_to_zero():
    f = aggregate(*pyramid_maps())
    assert torch.equal(f, torch.zeros_like(f))


def test_constant_levels_add_up():
    f = aggregate(*pyramid_maps(2.0, 3.0, 5.0))
    assert torch.allclose(f, torch.full_like(f, 10.0))


def test_channel_mismatch_is_rejected():
    c3, c4, _ = pyramid_maps()
    with pytest.raises(DimensionError):
        aggregate(c3, c4, torch.zeros(1, 3, 2, 2))


def test_zero_classifier_scores_one_half():
    selector = DiscerningQuerySelector(4, 2, DQSConfig())
    torch.nn.init.zeros_(selector.classifier.weight)
    torch.nn.init.zeros_(selector.classifier.bias)
    scores = selector.classify(torch.randn(1, 4, 3, 3))
    assert scores.shape == (1, 18)
    assert torch.allclose(scores, torch.full_like(scores, 0.5))


def test_saturated_logit_gives_unit_score():
    logits = torch.tensor([[[40.0, -40.0], [0.0, 0.0]]], dtype=torch.float64)
    scores = scores_from_logits(logits)
    assert abs(float(scores[0, 0]) - 1.0) < 1e-6
    # class-major: fg of both locations, then bg of both
    assert torch.allclose(scores[0, 1], torch.tensor(0.5, dtype=torch.float64))


def test_scores_match_direct_softmax():
    rng = np.random.default_rng(0)
    logits = rng.normal(scale=3.0, size=(3, 20, 2))
    scores = scores_from_logits(torch.from_numpy(logits)).numpy()
    exp = np.exp(logits)
    probs = exp / exp.sum(-1, keepdims=True)
    np.testing.assert_allclose(scores[:, :20], probs[..., 0], atol=1e-6)
    np.testing.assert_allclose(scores[:, 20:], probs[..., 1], atol=1e-6)
    np.testing.assert_allclose(scores[:, :20] + scores[:, 20:], 1.0, atol=1e-6)


def test_non_finite_logits_are_rejected():
    with pytest.raises(InputError):
        scores_from_logits(torch.tensor([[[float("nan"), 0.0]]]))


def example_scores():
    fg = torch.tensor([0.9, 0.1, 0.7, 0.4], dtype=torch.float64)
    return torch.cat([fg, 1 - fg]), torch.randn(1, 3, 2, 2, dtype=torch.float64)


def test_literal_ranking_takes_background_confident_locations():
    scores, features = example_scores()
    selected = select_topk(scores, features, k=2)
    assert selected.positions.tolist() == [[0, 1]]


def test_foreground_only_ranking():
    scores, features = example_scores()
    selected = select_topk(scores, features, k=2, fg_only=True)
    assert selected.positions.tolist() == [[0, 2]]


def test_equal_scores_pick_lowest_indices():
    scores = torch.full((8,), 0.5)
    assert select_topk(scores, torch.zeros(1, 2, 2, 2), k=3).positions.tolist() == [[0, 1, 2]]


def test_k_equal_to_hw_covers_every_location():
    scores = torch.rand(18, generator=torch.Generator().manual_seed(0))
    selected = select_topk(scores, torch.zeros(1, 2, 3, 3), k=9)
    assert sorted(selected.positions[0].tolist()) == list(range(9))


def test_k_above_hw_is_a_capacity_error():
    with pytest.raises(CapacityError):
        select_topk(torch.rand(8), torch.zeros(1, 2, 2, 2), k=5)


def test_selected_embeddings_are_the_features_at_the_positions():
    features = torch.randn(2, 5, 3, 3)
    scores = torch.rand(2, 18)
    selected = select_topk(scores, features, k=4)
    flat = features.flatten(2)
    for b in range(2):
        for j, p in enumerate(selected.positions[b].tolist()):
            assert torch.equal(selected.embeddings[b, j], flat[b, :, p])


def oracle_select(scores, k, fg_only=False):
    """Sort every (score, block, position) entry, then walk it taking unseen locations"""
    hw = len(scores) // 2
    entries = [(scores[p], p, 0) for p in range(hw)]
    if not fg_only:
        entries += [(scores[hw + p], p, 1) for p in range(hw)]
    entries.sort(key=lambda e: (-e[0], e[1], e[2]))
    taken = []
    for _, position, _ in entries:
        if position not in taken:
            taken.append(position)
        if len(taken) == k:
            break
    return taken


@pytest.mark.parametrize("fg_only", [False, True])
def test_selection_matches_exhaustive_sort(fg_only):
    rng = np.random.default_rng(42)
    for trial in range(1000):
        hw = int(rng.integers(1, 13))
        k = int(rng.integers(1, hw + 1))
        if trial % 2:
            fg = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0], size=hw)
        else:
            fg = rng.random(hw)
        scores = np.concatenate([fg, 1 - fg])
        selected = select_topk(torch.from_numpy(scores), torch.zeros(1, 1, 1, hw, dtype=torch.float64), k,
                               fg_only=fg_only)
        positions = selected.positions[0].tolist()
        assert positions == oracle_select(scores.tolist(), k, fg_only)
        assert len(set(positions)) == k

        best = fg if fg_only else np.maximum(fg, 1 - fg)
        unselected = [p for p in range(hw) if p not in positions]
        if unselected:
            assert best[positions].min() >= best[unselected].max()


def test_positions_map_to_cell_centres():
    coords = positions_to_coords(torch.tensor([[0, 5]]), h=2, w=4)
    assert torch.allclose(coords, torch.tensor([[[0.125, 0.25], [0.375, 0.75]]], dtype=torch.float64))


def micro_config(**dqs) -> ModelConfig:
    raw = preset_config("micro")
    return ModelConfig.parse_obj({**raw, "dqs": dqs})


def test_model_selects_unique_queries_per_image():
    torch.manual_seed(0)
    model = GEMModel(micro_config(enabled=True))
    out = model(torch.rand(2, 3, 64, 64))
    positions = out.dqs.selected.positions
    assert positions.shape == (2, model.cfg.decoder.num_queries)
    for row in positions.tolist():
        assert len(set(row)) == len(row)


def test_disabled_selection_uses_image_independent_queries():
    torch.manual_seed(0)
    model = GEMModel(micro_config(enabled=False, aux_loss=False))
    assert model.dqs is None
    out = model(torch.rand(2, 3, 64, 64))
    assert out.dqs is None
    content, pos = model.decoder.learned_queries(2)
    assert torch.equal(content[0], content[1]) and torch.equal(pos[0], pos[1])


def test_auxiliary_scores_without_selection():
    torch.manual_seed(0)
    model = GEMModel(micro_config(enabled=False, aux_loss=True))
    out = model(torch.rand(1, 3, 64, 64))
    assert out.dqs.selected is None
    assert out.dqs.logits.shape == (1, 64, 2)
