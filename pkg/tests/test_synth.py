import numpy as np
import pytest

from mvpad.common import Label
from mvpad.imaging import GrayImage, crop_centered, decode_image, load_manifest
from mvpad.synth import SynthConfig, band_limited_field, dot_energy, generate, halftone, render


def energies(cfg, p_idx, unknown, n=50):
    """Dot-frequency energy of every crop, keyed by label."""
    out = {}
    for label in (Label.BONA_FIDE, Label.ATTACK):
        vals = []
        for i in range(n):
            px, c = render(cfg, np.random.default_rng([cfg.seed, p_idx, int(label), i]), label, unknown)
            vals.append(dot_energy(crop_centered(GrayImage(px), c, cfg.size).pixels, cfg.period))
        out[label] = np.array(vals)
    return out


def balanced_accuracy(e, t):
    return (np.mean(e[Label.ATTACK] >= t) + np.mean(e[Label.BONA_FIDE] < t)) / 2


def best_threshold(e):
    cands = np.sort(np.concatenate(list(e.values())))
    return max(cands, key=lambda t: balanced_accuracy(e, t))


@pytest.fixture(scope="module")
def train_energy():
    return energies(SynthConfig(), 0, False)


def test_counts(tmp_path):
    ds = generate(SynthConfig(per_class=50), tmp_path)
    assert len(ds) == 300
    assert len(load_manifest(tmp_path / "manifest.csv").records) == 300
    assert len(list((tmp_path / "images").glob("*.png"))) == 300
    for part in ("train", "test_known", "test_unknown"):
        recs = ds.partition(part)
        assert sum(r.label == Label.BONA_FIDE for r in recs) == 50


def test_deterministic(tmp_path):
    cfg = SynthConfig(per_class=3, seed=5)
    generate(cfg, tmp_path / "a")
    generate(cfg, tmp_path / "b")
    for p in sorted((tmp_path / "a" / "images").iterdir()):
        assert p.read_bytes() == (tmp_path / "b" / "images" / p.name).read_bytes()
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()


def test_images_are_frames_with_centres(tmp_path):
    cfg = SynthConfig(per_class=2)
    ds = generate(cfg, tmp_path)
    for r in ds.records:
        img = decode_image(tmp_path / r.image_path)
        assert img.pixels.shape == (cfg.frame, cfg.frame)
        cx, cy = r.iris_center
        assert cfg.size / 2 <= cx <= cfg.frame - cfg.size / 2


def test_attack_energy_ratio(train_energy):
    assert train_energy[Label.ATTACK].mean() >= 3 * train_energy[Label.BONA_FIDE].mean()


def test_spectral_threshold_separates_train(train_energy):
    assert balanced_accuracy(train_energy, best_threshold(train_energy)) >= 0.95


def test_unknown_shift_degrades_threshold(train_energy):
    t = best_threshold(train_energy)
    train_acc = balanced_accuracy(train_energy, t)
    unknown_acc = balanced_accuracy(energies(SynthConfig(), 2, True), t)
    assert train_acc - unknown_acc >= 0.10


def test_field_statistics():
    f = band_limited_field(np.random.default_rng(0), 64, 0.12)
    assert abs(f.mean()) < 1e-12 and abs(f.std() - 1) < 1e-12


def test_halftone_period():
    h = halftone(16, 4.0, (0.0, 0.0))
    np.testing.assert_allclose(h[:, :12], h[:, 4:], atol=1e-12)
    assert h[0, 0] == 1.0


@pytest.mark.parametrize("kwargs", [dict(period=1.5), dict(amplitude=0.0), dict(unknown_amplitude=1.5),
                                    dict(per_class=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SynthConfig(**kwargs)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="cannot write"):
        generate(SynthConfig(per_class=1), blocker / "sub")
