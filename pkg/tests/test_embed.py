import sys
import threading
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from PIL import Image

from retouchdet.embed import (EMBEDDING_DIM, Embedding, EmbeddingCache, ExternalCommand,
                              LowFrequencyStub, PrecomputedStore, embedding_difference,
                              file_sha256, format_vector, get_embedding, make_backend)
from retouchdet.errors import (BackendUnavailable, LengthMismatch, MalformedOutput,
                               MissingEntry, MissingFile)


@pytest.fixture
def image(tmp_path):
    rng = np.random.default_rng(0)
    path = tmp_path / "face.png"
    Image.fromarray(rng.integers(0, 256, (64, 48, 3), dtype=np.uint8)).save(path)
    return path


def _script(tmp_path, body):
    path = tmp_path / "emb.py"
    path.write_text(body)
    return f"{sys.executable} {path}"


def test_store_lookup(tmp_path, image):
    store = tmp_path / "store"
    store.mkdir()
    vec = np.random.default_rng(1).standard_normal(EMBEDDING_DIM)
    (store / f"{file_sha256(image)}.vec").write_text(format_vector(vec))
    emb = get_embedding(PrecomputedStore(store), image)
    np.testing.assert_array_equal(emb.vector, vec)


def test_store_missing_entry(tmp_path, image):
    (tmp_path / "store").mkdir()
    with pytest.raises(MissingEntry):
        get_embedding(PrecomputedStore(tmp_path / "store"), image)


def test_command_short_output(tmp_path, image):
    cmd = _script(tmp_path, "print(' '.join(['0.5'] * 511))\n")
    with pytest.raises(MalformedOutput):
        get_embedding(ExternalCommand(cmd), image)


def test_command_nonfinite_output(tmp_path, image):
    cmd = _script(tmp_path, "print(' '.join(['nan'] + ['1'] * 511))\n")
    with pytest.raises(MalformedOutput):
        get_embedding(ExternalCommand(cmd), image)


def test_command_ok_and_receives_path(tmp_path, image):
    cmd = _script(tmp_path, "import sys, os\nn = os.path.getsize(sys.argv[1])\n"
                            "print(' '.join(str(n + i) for i in range(512)))\n")
    emb = get_embedding(ExternalCommand(cmd), image)
    assert emb.vector[0] == image.stat().st_size and emb.vector[511] == emb.vector[0] + 511


def test_command_failure(tmp_path, image):
    cmd = _script(tmp_path, "import sys\nsys.exit(3)\n")
    with pytest.raises(BackendUnavailable):
        get_embedding(ExternalCommand(cmd), image)
    with pytest.raises(BackendUnavailable):
        get_embedding(ExternalCommand(str(tmp_path / "does-not-exist")), image)


def test_missing_image(tmp_path):
    with pytest.raises(MissingFile):
        get_embedding(LowFrequencyStub(), tmp_path / "none.png")


def test_difference_examples():
    a = np.zeros(512)
    a[0] = 1
    b = np.zeros(512)
    b[1] = 1
    d = embedding_difference(a, b)
    assert d[0] == 1 and d[1] == -1 and not d[2:].any()
    assert not embedding_difference(a, a).any()
    with pytest.raises(LengthMismatch):
        embedding_difference(np.zeros(511), a)


def test_difference_matches_scalar_loop():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal(512), rng.standard_normal(512)
    d = embedding_difference(Embedding(a, "x"), Embedding(b, "x"))
    assert [float(v) for v in d] == [a[i] - b[i] for i in range(512)]
    np.testing.assert_array_equal(embedding_difference(b, a), -d)


class CountingBackend:
    source_id = "count"

    def __init__(self):
        self.calls = 0
        self.lock = threading.Lock()

    def embed(self, path):
        with self.lock:
            self.calls += 1
        return np.random.default_rng(self.calls).standard_normal(512) * 1e-7 + np.pi


def test_cache_hit_bit_identical(tmp_path, image):
    backend = CountingBackend()
    cache = EmbeddingCache(tmp_path / "cache")
    first = get_embedding(backend, image, cache)
    second = get_embedding(backend, image, cache)
    assert backend.calls == 1
    assert first.vector.tobytes() == second.vector.tobytes()
    # a fresh cache object over the same directory also hits
    third = get_embedding(backend, image, EmbeddingCache(tmp_path / "cache"))
    assert backend.calls == 1 and third.vector.tobytes() == first.vector.tobytes()


def test_cache_keyed_by_source(tmp_path, image):
    cache = EmbeddingCache(tmp_path / "cache")
    a = get_embedding(LowFrequencyStub(0), image, cache)
    b = get_embedding(LowFrequencyStub(1), image, cache)
    assert not np.array_equal(a.vector, b.vector)


def test_cache_concurrent_access(tmp_path, image):
    cache = EmbeddingCache(tmp_path / "cache")
    backend = LowFrequencyStub(3)
    with ThreadPoolExecutor(8) as pool:
        results = list(pool.map(lambda _: get_embedding(backend, image, cache).vector, range(32)))
    assert all(r.tobytes() == results[0].tobytes() for r in results)


def test_stub_deterministic_and_compression_insensitive(tmp_path, image):
    stub = LowFrequencyStub(0)
    v1 = get_embedding(stub, image).vector
    assert v1.shape == (512,) and np.isfinite(v1).all()
    np.testing.assert_array_equal(v1, get_embedding(LowFrequencyStub(0), image).vector)
    smooth = np.asarray(Image.open(image).convert("RGB").resize((16, 16)).resize((48, 64), Image.BILINEAR))
    Image.fromarray(smooth).save(tmp_path / "smooth.png")
    Image.fromarray(smooth).save(tmp_path / "smooth.jpg", quality=30)
    a = stub.embed(tmp_path / "smooth.png")
    b = stub.embed(tmp_path / "smooth.jpg")
    assert np.linalg.norm(a - b) < 0.05 * np.linalg.norm(a)


def test_make_backend():
    assert isinstance(make_backend("stub"), LowFrequencyStub)
    assert make_backend("stub:5").seed == 5
    assert isinstance(make_backend("store:/tmp"), PrecomputedStore)
    assert isinstance(make_backend("cmd:echo hi"), ExternalCommand)
    with pytest.raises(BackendUnavailable):
        make_backend("grpc:host")
