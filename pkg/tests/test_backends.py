import numpy as np
import pytest

from cfkit.backends.toy import ToyAffineGenerator, ToyCaptioner, ToyLinearClassifier
from cfkit.types import (
    ClassSetUndefinedError,
    EmbeddingVector,
    ImageTensor,
    LatentVector,
    TimestepExhaustedError,
    UnknownClassError,
)


class TestCaptioner:
    def test_deterministic_and_long_enough(self, captioner, sample_image):
        c1 = captioner.caption(sample_image, min_words=20)
        c2 = captioner.caption(sample_image, min_words=20)
        assert c1 == c2
        assert len(c1.split()) >= 20

    def test_min_words_one(self, captioner, sample_image):
        assert captioner.caption(sample_image, min_words=1)

    def test_seed_changes_caption(self, world, sample_image):
        c1 = ToyCaptioner(world, seed=1).caption(sample_image, min_words=20)
        c2 = ToyCaptioner(world, seed=2).caption(sample_image, min_words=20)
        assert c1 != c2

    def test_caption_mentions_content(self, captioner, world, sample_image):
        tokens = captioner.caption(sample_image, min_words=20).split()
        assert world.classes[0] in tokens
        assert world.class_color[world.classes[0]] in tokens

    def test_rejects_bad_arguments(self, captioner, sample_image):
        with pytest.raises(ValueError):
            captioner.caption(sample_image, min_words=0)
        with pytest.raises(ValueError):
            captioner.caption(sample_image, repetition_penalty=0.5)


class TestJointEncoder:
    def test_pair_deterministic(self, encoder, sample_image):
        a = encoder.encode_pair(sample_image, "a heron on a rock")
        b = encoder.encode_pair(sample_image, "a heron on a rock")
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].data, b[1].data)

    def test_distinct_texts_distinct_embeddings(self, encoder, sample_image):
        _, t1 = encoder.encode_pair(sample_image, "a heron on a rock")
        _, t2 = encoder.encode_pair(sample_image, "a heron on a stone")
        assert not np.array_equal(t1.data, t2.data)

    def test_dims_match_descriptor(self, encoder, sample_image):
        img_emb, txt_emb = encoder.encode_pair(sample_image, "some text")
        assert img_emb.dim == txt_emb.dim == encoder.embed_dim

    def test_empty_text_rejected(self, encoder, sample_image):
        with pytest.raises(ValueError):
            encoder.encode_pair(sample_image, "")


class TestAffineGenerator:
    def test_nonzero_coefficients_enforced(self, world):
        with pytest.raises(ValueError):
            ToyAffineGenerator(world, a=1.0, b=0.0)
        with pytest.raises(ValueError):
            ToyAffineGenerator(world, a=0.0, b=0.1)

    def test_affine_arithmetic(self, world):
        gen = ToyAffineGenerator(world, num_steps=3, a=0.9, b=0.1)
        d = gen.latent_dim
        z = LatentVector(np.ones(d), 1)
        out = gen.denoise_step(z, 1, EmbeddingVector(np.zeros(d)), EmbeddingVector(np.zeros(d)))
        assert np.allclose(out.data, 0.9 * np.ones(d), atol=0)
        assert out.timestep == 0

    def test_timestep_checks(self, generator):
        d = generator.latent_dim
        zero = EmbeddingVector(np.zeros(d))
        with pytest.raises(TimestepExhaustedError):
            generator.denoise_step(LatentVector(np.zeros(d), 0), 0, zero, zero)
        with pytest.raises(ValueError):
            generator.denoise_step(LatentVector(np.zeros(d), 2), 3, zero, zero)

    def test_invert_then_denoise_round_trip(self, generator):
        rng = np.random.default_rng(0)
        d = generator.latent_dim
        text = EmbeddingVector(rng.normal(size=d))
        null = generator.null_embedding()
        z0 = LatentVector(rng.normal(size=d), 0)
        z = z0
        for _ in range(5):
            z = generator.invert_step(z, text, null)
        for k in range(5, 0, -1):
            z = generator.denoise_step(z, k, text, null)
        assert np.max(np.abs(z.data - z0.data)) < 1e-10

    def test_step_is_linear(self, generator):
        # denoise(au + bv) == a*denoise(u) + b*denoise(v) when conditioning is zero.
        rng = np.random.default_rng(1)
        d = generator.latent_dim
        zero = EmbeddingVector(np.zeros(d))
        u, v = rng.normal(size=d), rng.normal(size=d)
        alpha, beta = 0.3, -1.7
        lhs = generator.denoise_step(LatentVector(alpha * u + beta * v, 2), 2, zero, zero)
        ru = generator.denoise_step(LatentVector(u, 2), 2, zero, zero)
        rv = generator.denoise_step(LatentVector(v, 2), 2, zero, zero)
        assert np.allclose(lhs.data, alpha * ru.data + beta * rv.data, atol=1e-12)

    def test_codec_round_trip(self, generator, sample_image):
        z = generator.encode_image(sample_image)
        back = generator.decode_latent(z, "roundtrip")
        assert np.array_equal(back.data, sample_image.data)


class TestClassifier:
    def test_scores_shape_and_determinism(self, classifier, sample_image):
        s1 = classifier.classify(sample_image)
        s2 = classifier.classify(sample_image)
        assert s1.n_classes == len(classifier.class_names)
        assert np.array_equal(s1.scores, s2.scores)

    def test_class_set_required(self, world, sample_image):
        clf = ToyLinearClassifier(world.image_size, None, seed=0)
        with pytest.raises(ClassSetUndefinedError):
            clf.classify(sample_image)

    def test_unknown_label_rejected(self, classifier, sample_image):
        with pytest.raises(UnknownClassError):
            classifier.head_gradient([sample_image], ["not-a-class"])

    def test_trains_to_perfect_accuracy_on_own_data(self, world, classifier):
        # 10 synthetic images, one per class; training accuracy must reach 100%.
        rng = np.random.default_rng(3)
        images, labels = [], []
        for i, cls in enumerate(world.classes[:10]):
            images.append(ImageTensor(world.make_image(cls, world.class_color[cls], rng), f"t{i}"))
            labels.append(cls)
        classifier.fit_head(images, labels, epochs=300, lr=0.01)
        hits = 0
        for img, lab in zip(images, labels):
            scores = classifier.classify(img)
            hits += int(scores.class_names[int(np.argmax(scores.scores))] == lab)
        assert hits == len(images)

    def test_head_gradient_matches_finite_differences(self, world, sample_image):
        clf = ToyLinearClassifier(world.image_size, tuple(world.classes), seed=0, feature_scale=1.0)
        rng = np.random.default_rng(4)
        clf._w = rng.normal(size=clf._w.shape) * 0.1
        grads, loss = clf.head_gradient([sample_image], [world.classes[0]])
        eps = 1e-6
        for (i, j) in [(0, 0), (3, 10), (7, 63)]:
            clf._w[i, j] += eps
            _, up = clf.head_gradient([sample_image], [world.classes[0]])
            clf._w[i, j] -= 2 * eps
            _, dn = clf.head_gradient([sample_image], [world.classes[0]])
            clf._w[i, j] += eps
            assert grads["head.weight"][i, j] == pytest.approx((up - dn) / (2 * eps), abs=1e-5)
