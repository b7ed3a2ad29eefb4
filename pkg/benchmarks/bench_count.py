"""Compare the numba and numpy backends on counting and trace reading.

    python benchmarks/bench_count.py --tokens 2000000

Counting runs both kernels on the same columnar table. Reading compares the
byte scanner (numba) with the per-line json reader on one trace file.
"""

import argparse
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from moe_steer import _kernels  # noqa: E402
from moe_steer.trace import ExpertKey, ModelShape, _read_table_json, read_table  # noqa: E402
from oracles import write_large_trace  # noqa: E402


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - start)
    return min(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--tokens", type=int, default=2_000_000, help="trace length (multiple of 1000)")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--experts", type=int, default=16)
    p.add_argument("--top-o", type=int, default=2)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--json-tokens", type=int, default=200_000, help="tokens read by the slow json path")
    args = p.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        sys.exit("numba is not importable; nothing to compare")

    shape = ModelShape(args.layers, args.experts, args.top_o)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "bench.jsonl"
        write_large_trace(path, args.tokens, shape, ExpertKey(0, 1))
        small = Path(tmp) / "small.jsonl"
        write_large_trace(small, args.json_tokens, shape, ExpertKey(0, 1))

        read_table(small)  # compile the scanner
        t_scan, table = best_of(lambda: read_table(path), args.repeats)
        t_scan_small, _ = best_of(lambda: read_table(small), args.repeats)
        t_json_small, _ = best_of(lambda: _read_table_json(small, None), 1)
        mb = path.stat().st_size / 1e6

    ids, slots = table.marker_ids(), table.slots
    n_markers, n_keys = len(table.markers), shape.n_keys
    _kernels.count_routing_numba(ids[:10], slots[:10], n_markers, n_keys)  # compile
    t_nb, a = best_of(lambda: _kernels.count_routing_numba(ids, slots, n_markers, n_keys), args.repeats)
    t_np, b = best_of(lambda: _kernels.count_routing_numpy(ids, slots, n_markers, n_keys), args.repeats)
    assert all(np.array_equal(x, y) for x, y in zip(a, b)), "backends disagree"

    T = table.n_tokens
    print(f"shape L={shape.n_layers} N={shape.n_experts} O={shape.top_o}, {T:,} tokens, {mb:.0f} MB")
    print(f"count  numba  {t_nb * 1e3:9.1f} ms  {T / t_nb / 1e6:8.1f} Mtok/s")
    print(f"count  numpy  {t_np * 1e3:9.1f} ms  {T / t_np / 1e6:8.1f} Mtok/s  ({t_np / t_nb:.1f}x numba)")
    print(f"read   scan   {t_scan * 1e3:9.1f} ms  {T / t_scan / 1e6:8.1f} Mtok/s")
    n = args.json_tokens
    print(f"read   json   {t_json_small * 1e3:9.1f} ms  {n / t_json_small / 1e6:8.2f} Mtok/s  "
          f"({t_json_small / t_scan_small:.0f}x scan on {n:,} tokens)")


if __name__ == "__main__":
    main()
