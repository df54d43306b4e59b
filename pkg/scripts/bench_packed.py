"""Time one packed 3x3 binary convolution against the float path on a single thread."""
from __future__ import annotations

import argparse
import time
import warnings

import numpy as np
from threadpoolctl import threadpool_limits

from bnnkit.normalizers import BatchNormParams
from bnnkit.packed import FoldWarning, fuse_bn_sign, pack_bits, packed_conv_forward
from bnnkit.tensor import conv2d_array


def best_of(fn, repeats: int) -> float:
    fn()
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--channels", type=int, default=64)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    c, s = args.channels, args.size
    x = rng.choice([-1.0, 1.0], (args.batch, c, s, s))
    w = rng.choice([-1.0, 1.0], (c, c, 3, 3))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", FoldWarning)
        layer = fuse_bn_sign(BatchNormParams.create(c), w)
    packed = pack_bits(x.transpose(0, 2, 3, 1))
    with threadpool_limits(1):
        t_float = best_of(lambda: conv2d_array(x, w, 1, 1, -1.0), args.repeats)
        t_packed = best_of(lambda: packed_conv_forward(layer, packed), args.repeats)
        t_pack = best_of(lambda: pack_bits(x.transpose(0, 2, 3, 1)), args.repeats)
    print(f"float conv   {1e3 * t_float:8.2f} ms")
    print(f"packed conv  {1e3 * t_packed:8.2f} ms  ({t_float / t_packed:.1f}x)")
    print(f"input pack   {1e3 * t_pack:8.2f} ms  ({t_float / (t_packed + t_pack):.1f}x including packing)")


if __name__ == "__main__":
    main()
