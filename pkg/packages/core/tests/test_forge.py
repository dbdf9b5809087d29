import numpy as np
import pytest
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from lare2_core.codec import LatentCodec, encode_records
from lare2_core.denoiser import ConvDenoiser, save_denoiser
from lare2_core.diffusion import make_linear_schedule
from lare2_core.errors import DataError, ParameterError
from lare2_core.forge import GeneratorSpec, Sampler, assign_splits, build_subsets, generate_latents, synth_real
from lare2_core.images import export_pnm, read_image, write_image
from lare2_core.manifest import DatasetManifest, ManifestRecord
from lare2_core.training import init_module


class TestSynthReal:
    def test_same_seed_same_bytes(self):
        a = synth_real(5, seed=11)
        b = synth_real(5, seed=11)
        for (id_a, image_a), (id_b, image_b) in zip(a, b):
            assert id_a == id_b
            assert image_a.numpy().tobytes() == image_b.numpy().tobytes()

    def test_unique_ids(self):
        items = synth_real(100, seed=0, size=16)
        assert len({item_id for item_id, _ in items}) == 100

    def test_shape_and_range(self):
        (_, image), = synth_real(1, seed=2, size=64, channels=3)
        assert image.shape == (3, 64, 64)
        assert image.min() >= -1.0 and image.max() <= 1.0

    def test_high_frequency_energy_varies(self):
        energies = []
        for _, image in synth_real(40, seed=5):
            spectrum = np.abs(np.fft.fft2(image[0].numpy())) ** 2
            freqs = np.fft.fftfreq(64)
            radius = np.sqrt(freqs[:, None] ** 2 + freqs[None, :] ** 2)
            energies.append(spectrum[radius > 0.25].sum() / spectrum.sum())
        assert np.std(energies) > 0

    def test_fine_detail_is_a_small_share_of_energy(self):
        shares = []
        for _, image in synth_real(40, seed=5):
            spectrum = np.abs(np.fft.fft2(image[0].numpy())) ** 2
            freqs = np.fft.fftfreq(64)
            radius = np.sqrt(freqs[:, None] ** 2 + freqs[None, :] ** 2)
            shares.append(spectrum[radius > 0.25].sum() / spectrum.sum())
        assert np.mean(shares) < 0.01

    def test_count_must_be_positive(self):
        with pytest.raises(ParameterError):
            synth_real(0, seed=0)


class TestSplits:
    def test_disjoint_and_exhaustive(self):
        ids = [f"x/{i}" for i in range(200)]
        splits = assign_splits(ids, seed=3)
        assert set(splits) == set(ids)
        counts = {name: sum(value == name for value in splits.values()) for name in ("train", "val", "test")}
        assert counts == {"train": 160, "val": 20, "test": 20}


class TestManifest:
    def test_round_trip(self, make_corpus):
        manifest = make_corpus(count=10)
        assert DatasetManifest.parse(manifest.serialize(), root=manifest.root) == manifest

    def test_read_write(self, make_corpus, tmp_path):
        manifest = make_corpus(count=4)
        manifest.write(tmp_path / "m.jsonl")
        loaded = DatasetManifest.read(tmp_path / "m.jsonl")
        assert loaded == manifest
        loaded.check_paths()

    def test_duplicate_ids(self):
        record = ManifestRecord(id="a/1", path="p", label=0, generator="real", split="train")
        with pytest.raises(DataError, match="Duplicate"):
            DatasetManifest(records=(record, record))

    def test_bad_label_and_split(self):
        with pytest.raises(DataError):
            ManifestRecord(id="a", path="p", label=2, generator="real", split="train")
        with pytest.raises(DataError):
            ManifestRecord(id="a", path="p", label=0, generator="real", split="holdout")

    def test_malformed_line(self):
        with pytest.raises(DataError, match="Malformed"):
            DatasetManifest.parse('{"id": "a"}\n')

    def test_missing_image(self, tmp_path):
        record = ManifestRecord(id="a/1", path="nowhere.limg", label=0, generator="real", split="train")
        with pytest.raises(DataError, match="a/1"):
            DatasetManifest(records=(record,), root=tmp_path).check_paths()


class TestImages:
    def test_round_trip(self, tmp_path):
        image = torch.linspace(-1, 1, 2 * 4 * 3).reshape(2, 4, 3)
        write_image(tmp_path / "x.limg", image)
        assert torch.equal(read_image(tmp_path / "x.limg"), image)

    def test_payload_is_hwc(self, tmp_path):
        image = torch.arange(6, dtype=torch.float32).reshape(2, 1, 3)
        write_image(tmp_path / "x.limg", image)
        payload = (tmp_path / "x.limg").read_bytes()[5 + 12 :]
        np.testing.assert_array_equal(np.frombuffer(payload, dtype="<f4"), [0, 3, 1, 4, 2, 5])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.limg").write_bytes(b"GARBAGE")
        with pytest.raises(DataError, match="magic"):
            read_image(tmp_path / "x.limg")

    def test_export_pnm(self, tmp_path):
        assert export_pnm(tmp_path / "gray", torch.zeros(1, 8, 8)).suffix == ".pgm"
        assert export_pnm(tmp_path / "color", torch.zeros(3, 8, 8)).suffix == ".ppm"


class TestBuildSubsets:
    @pytest.fixture
    def generators(self, tmp_path):
        paths = {}
        for weights, seed in (("a", 0), ("b", 1)):
            paths[weights] = tmp_path / f"diffusion_{weights}.ck"
            save_denoiser(paths[weights], init_module(lambda: ConvDenoiser(4, 8, 1), seed, torch.float32))
        return [
            GeneratorSpec.parse("ddpm_a:a:ddpm", paths.__getitem__),
            GeneratorSpec.parse("ddim_a:a:ddim", paths.__getitem__),
            GeneratorSpec.parse("ddpm_b:b:ddpm", paths.__getitem__),
        ]

    @pytest.fixture
    def codec(self):
        return init_module(lambda: LatentCodec(hidden=8), 0, torch.float32).eval()

    def build(self, generators, codec, pool, tmp_path, seed=0):
        return build_subsets(
            generators,
            codec,
            make_linear_schedule(10, 1e-3, 0.02),
            pool,
            reals_per_subset=10,
            fakes_per_subset=10,
            seed=seed,
            root=tmp_path,
            ddim_steps=5,
        )

    def test_balanced_subsets(self, generators, codec, make_corpus, tmp_path):
        manifest = self.build(generators, codec, make_corpus(count=30), tmp_path)
        assert len(manifest) == 60
        assert manifest.subsets() == ["ddpm_a", "ddim_a", "ddpm_b"]
        for tag in manifest.subsets():
            subset = manifest.filter(subset=tag)
            assert len(subset.filter(label=0)) == len(subset.filter(label=1)) == 10
            assert {record.generator for record in subset.filter(label=1)} == {tag}
        manifest.check_paths()

    def test_reals_are_disjoint_across_subsets(self, generators, codec, make_corpus, tmp_path):
        manifest = self.build(generators, codec, make_corpus(count=30), tmp_path)
        real_paths = [record.path for record in manifest.filter(label=0)]
        assert len(set(real_paths)) == len(real_paths)

    def test_deterministic(self, generators, codec, make_corpus, tmp_path):
        pool = make_corpus(count=30)
        first = self.build(generators, codec, pool, tmp_path)
        fake_bytes = [first.resolve(record).read_bytes() for record in first.filter(label=1)]
        second = self.build(generators, codec, pool, tmp_path)
        assert second == first
        assert [second.resolve(record).read_bytes() for record in second.filter(label=1)] == fake_bytes

    def test_needs_two_generators(self, generators, codec, make_corpus, tmp_path):
        with pytest.raises(ParameterError, match="two"):
            self.build(generators[:1], codec, make_corpus(count=30), tmp_path)

    def test_missing_checkpoint(self, generators, codec, make_corpus, tmp_path):
        broken = [GeneratorSpec("ghost", tmp_path / "missing.ck", Sampler.DDPM), *generators[1:]]
        with pytest.raises(DataError, match="ghost"):
            self.build(broken, codec, make_corpus(count=30), tmp_path)

    def test_spec_parse_errors(self):
        with pytest.raises(ParameterError):
            GeneratorSpec.parse("ddpm_a:a", lambda weights: weights)
        with pytest.raises(ParameterError):
            GeneratorSpec.parse("x:a:euler", lambda weights: weights)

    @pytest.mark.slow
    def test_seed_only_denoisers_give_separable_corpora(self, pipeline):
        # ddpm_a and ddpm_b come from denoisers that differ only in their training seed.
        features, labels = [], []
        for label, tag in enumerate(("ddpm_a", "ddpm_b")):
            latents = encode_records(pipeline.codec, pipeline.subsets.filter(generator=tag)).double()
            stats = torch.cat([latents.mean(dim=(2, 3)), latents.std(dim=(2, 3)), latents.flatten(1)], dim=1)
            features.append(stats.numpy())
            labels += [label] * len(latents)
        classifier = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
        scores = cross_val_score(classifier, np.concatenate(features), np.array(labels), cv=5, scoring="accuracy")
        assert scores.mean() > 0.5


class TestGenerateLatents:
    @pytest.fixture
    def checkpoint(self, tmp_path):
        path = tmp_path / "diffusion_a.ck"
        save_denoiser(path, init_module(lambda: ConvDenoiser(4, 8, 1), 0, torch.float32))
        return path

    def generate(self, checkpoint, sampler, count, seed=5):
        spec = GeneratorSpec("g", checkpoint, sampler)
        schedule = make_linear_schedule(10, 1e-3, 0.02)
        return generate_latents(spec, schedule, count, (4, 2, 2), seed=seed, ddim_steps=5, dtype=torch.float64)

    @pytest.mark.parametrize("sampler", list(Sampler))
    def test_sample_does_not_depend_on_batch(self, checkpoint, sampler):
        small = self.generate(checkpoint, sampler, 2)
        large = self.generate(checkpoint, sampler, 5)
        torch.testing.assert_close(large[:2], small, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("sampler", list(Sampler))
    def test_images_and_seeds_draw_distinct_noise(self, checkpoint, sampler):
        latents = self.generate(checkpoint, sampler, 3)
        assert not torch.allclose(latents[0], latents[1])
        assert not torch.allclose(self.generate(checkpoint, sampler, 3, seed=6), latents)
