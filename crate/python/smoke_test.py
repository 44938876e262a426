"""Smoke test for the sparse_edit extension. Run after building it with maturin."""
import os
import tempfile

import sparse_edit as se

CONFIG = '{"latent": [32, 32], "channels": [8, 16], "steps": 4, "text_dim": 8}'

# otsu on a two-level map splits at the gap
vals = [0.1] * 48 + [0.9] * 16
eps, obj, m = se.otsu(8, 8, vals)
assert 0.1 <= eps < 0.9, eps
assert m.active_count() == 16

plan = se.apsc(se.Mask.rect(32, 32, 4, 4, 6, 6))
assert plan["cost"] > 0 and plan["origins"], plan

pipe = se.Pipeline(CONFIG)
store = se.CacheStore()
old, new = [2, 7, 4, 1, 8], [2, 7, 9, 1, 8]
dense = pipe.generate(old, store)
assert len(store) > 0 and store.total_bytes() > 0
again = pipe.generate(old)
assert dense.bit_eq(again)

user = se.Mask.rect(32, 32, 8, 8, 8, 8)
res = pipe.edit(old, new, store, user_mask=user, t1=1, t2=2)
assert res.status == "edit" and res.mask_source == "user", res
assert res.macs_ratio > 1.0, res.macs_ratio
assert res.bytes_after < res.bytes_before

# pixels outside the mask keep the original generation
n, c, h, w = dense.shape
a, b, bits = dense.tolist(), res.latent.tolist(), user.bits()
for i, v in enumerate(a):
    if not bits[i % (h * w)]:
        assert v == b[i]

with tempfile.TemporaryDirectory() as d:
    p = os.path.join(d, "latent.ft4")
    res.latent.save(p)
    assert se.Tensor.load(p).bit_eq(res.latent)

try:
    se.Pipeline('{"steps": 0}')
except se.SparseEditError:
    pass
else:
    raise AssertionError("invalid config accepted")

print("smoke test ok:", res, store.stats()["entries"] > 0)
