import numpy as np
import pytest
import torch

from heedlab.config import ExperimentConfig
from heedlab.diagnostics import (
    TokenRecord,
    build_token_records,
    mask_importance,
    mask_importance_map,
    read_token_table,
    residual_drift,
    run_diagnostics,
    teacher_attention,
    write_token_table,
)
from heedlab.exceptions import DiagnosticsError, ShapeMismatch
from heedlab.losses import ResidualTrace
from heedlab.toy.data import collate, synth_dataset
from heedlab.toy.train import prepare_teacher


def test_residual_drift():
    teacher = torch.zeros(1, 2, 3, 2, dtype=torch.float64)
    student = teacher.clone()
    student[0, 1, 2] = torch.tensor([3.0, 4.0])

    drift = residual_drift(ResidualTrace((1, 2), student), ResidualTrace((1, 2), teacher))
    assert drift.shape == (1, 2, 3)
    assert drift[0, 1, 2] == pytest.approx(5.0)
    assert drift.sum() == pytest.approx(5.0)

    with pytest.raises(ShapeMismatch):
        residual_drift(ResidualTrace((1,), torch.zeros(1, 1, 3, 2)), ResidualTrace((1,), torch.zeros(1, 1, 4, 2)))


def test_mask_importance_edge_cases(teacher, samples, tiny):
    sample = samples[0]
    assert mask_importance(teacher, sample, []) == 0.0
    # the last position feeds no supervised prediction
    assert mask_importance(teacher, sample, [tiny.seq_len - 1]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DiagnosticsError):
        mask_importance(teacher, sample, range(tiny.seq_len))
    with pytest.raises(DiagnosticsError):
        mask_importance(teacher, sample, [tiny.seq_len])


@pytest.fixture(scope="module")
def competent():
    config = ExperimentConfig()
    toy = config.toy_for(0)
    teacher, _ = prepare_teacher(toy, config.train, config.data.teacher_train, seed=0)
    return teacher, synth_dataset(toy, 16, seed=99, tasks=("dense",))


@pytest.mark.slow
@pytest.mark.parametrize("n_extra", [0, 2, 6])
def test_hiding_the_glyphs_costs_more_than_hiding_background(competent, n_extra):
    teacher, samples = competent
    rng = np.random.default_rng(n_extra)
    for sample in samples:
        glyphs = list(sample.glyph_positions)
        background = [p for p in range(sample.grid.n_patches) if p not in sample.glyph_positions]
        extra = rng.choice(background, size=n_extra, replace=False).tolist()
        decoys = rng.choice(background, size=len(glyphs) + n_extra, replace=False).tolist()
        assert mask_importance(teacher, sample, glyphs + extra) >= mask_importance(teacher, sample, decoys)


def test_mask_importance_map_agrees_with_single_masks(teacher, samples, tiny):

    sample = samples[2]
    drops = mask_importance_map(teacher, sample)
    assert drops.shape == (tiny.n_visual,)
    for p in (0, 4, tiny.n_visual - 1):
        assert drops[p] == pytest.approx(mask_importance(teacher, sample, [p]), abs=1e-9)


def test_teacher_attention_is_a_distribution(teacher, samples, tiny):
    batch = collate(samples[:3])
    with torch.no_grad():
        out = teacher(batch.features, batch.tokens)
    received = teacher_attention(out.attention)
    assert received.shape == (3, tiny.seq_len)
    np.testing.assert_allclose(received.sum(axis=1), 1.0, atol=1e-12)

    with pytest.raises(DiagnosticsError):
        teacher_attention([None, None])


def test_build_token_records(teacher, student, samples, tiny):
    records = build_token_records(teacher, student, samples[:2], batch_size=1)
    assert len(records) == 2 * 3 * tiny.seq_len
    assert sorted({r.layer_depth for r in records}) == pytest.approx([0.0, 1.0 / 3.0, 2.0 / 3.0])
    assert {r.layer for r in records} == set(tiny.alignment_layers())

    for record in records:
        visual = record.position < tiny.n_visual
        assert record.token_type == int(visual)
        assert (record.mask_importance is None) is not visual
        assert record.drift >= 0.0
        assert 0.0 <= record.density <= 1.0

    unmasked = build_token_records(teacher, student, samples[:2], with_mask=False)
    assert all(r.mask_importance is None for r in unmasked)
    assert [r.drift for r in unmasked] == pytest.approx([r.drift for r in records])


def test_token_table_round_trip(tmp_path, teacher, student, samples):
    records = build_token_records(teacher, student, samples[:1])
    path = tmp_path / "tokens.tsv"
    write_token_table(records, path)
    assert read_token_table(path) == records

    header = path.read_text().splitlines()[0].split("\t")
    assert header[0] == "image_id"
    assert header[-1] == "mask_importance"


def test_token_table_rejects_foreign_files(tmp_path):
    path = tmp_path / "other.tsv"
    path.write_text("a\tb\n1\t2\n")
    with pytest.raises(DiagnosticsError):
        read_token_table(path)


def synthetic_records(n_images: int = 12, with_mask: bool = True, seed: int = 0):
    """Drift driven by density, plus noise; three layers, nine visual and five text positions."""
    rng = np.random.default_rng(seed)
    records = []
    for image in range(n_images):
        density = rng.uniform(0.0, 1.0, size=14)
        attention = rng.dirichlet(np.ones(14))
        for index, layer in enumerate((1, 2, 3)):
            for p in range(14):
                visual = p < 9
                records.append(
                    TokenRecord(
                        image_id=image,
                        layer=layer,
                        position=p,
                        density=float(density[p]),
                        token_type=int(visual),
                        layer_depth=index / 3.0,
                        teacher_attention=float(attention[p]),
                        drift=float(0.1 + 2.0 * density[p] + 0.05 * rng.standard_normal() ** 2),
                        mask_importance=float(density[p] ** 2) if with_mask and visual else None,
                    )
                )
    return records


def test_run_diagnostics():
    report = run_diagnostics(synthetic_records(), n_resamples=100, seed=3)
    assert report.n_images == 12
    assert report.n_records == 12 * 3 * 14
    assert report.drift_deciles.ratio > 3.0
    assert report.mask_deciles is not None and report.mask_deciles.ratio > 10.0
    assert max(report.regression.semi_partial_r2, key=report.regression.semi_partial_r2.get) == "density"
    assert report.drift_spearman.mean > 0.9
    assert report.mask_spearman.mean == pytest.approx(1.0)

    data = report.to_dict()
    assert set(data["regression"]["bootstrap_ci"]) == {
        "joint",
        "density",
        "token_type",
        "layer_depth",
        "teacher_attention",
    }


def test_run_diagnostics_without_mask():
    report = run_diagnostics(synthetic_records(with_mask=False), n_resamples=100)
    assert report.mask_deciles is None
    assert report.mask_spearman is None
    assert report.to_dict()["mask_deciles"] is None


def test_run_diagnostics_needs_records():
    with pytest.raises(DiagnosticsError):
        run_diagnostics([])
