"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--seconds 10]

Prints the best-of-N wall time per kernel for each backend and the speedup.
Both backends are also compared on the benchmark inputs.
"""
import argparse
import timeit

import numpy as np

from talkhead import audio, synthetic
from talkhead.kernels import _pykernels
from talkhead.pose_render import pose_segments

try:
    from talkhead.kernels import _ckernels
except ImportError:
    _ckernels = None


def pitch_inputs(seconds):
    clip, _ = synthetic.speech_like(duration=seconds, seed=0)
    return audio.sliding_windows(clip), clip.sample_rate


def raster_inputs(frames):
    poses = synthetic.synthetic_poses(frames)
    return [np.asarray(pose_segments(p), dtype=np.int64) for p in poses]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seconds", type=float, default=10.0, help="audio length for the pitch kernel")
    args = ap.parse_args()

    windows, sr = pitch_inputs(args.seconds)
    segs = raster_inputs(int(args.seconds * audio.FPS))
    backends = {"python": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not built; timing the fallback only")

    def pitch(mod):
        return lambda: mod.pitch_track(windows, sr, audio.PITCH_FMIN, audio.PITCH_FMAX, audio.VOICING_THRESHOLD)

    def raster(mod):
        def run():
            for s in segs:
                mod.draw_segments(np.zeros((64, 64), np.uint8), s)
        return run

    results = {}
    for name, mod in backends.items():
        results[name] = {"pitch_track": bench(pitch(mod), args.repeat), "draw_segments": bench(raster(mod), args.repeat)}

    if "cython" in backends:
        p_py, v_py = pitch(_pykernels)()
        p_c, v_c = pitch(_ckernels)()
        # FFT vs direct-sum autocorrelation: equal up to rounding, identical after float32 storage
        pitch_diff = float(np.abs(p_py - p_c).max())
        same_voicing = np.array_equal(v_py, v_c)
        same_raster = True
        for s in segs:
            a, b = np.zeros((64, 64), np.uint8), np.zeros((64, 64), np.uint8)
            _pykernels.draw_segments(a, s)
            _ckernels.draw_segments(b, s)
            same_raster &= np.array_equal(a, b)
        print(f"pitch max |diff| {pitch_diff:.1e} Hz, voicing identical: {same_voicing}, "
              f"raster identical: {same_raster}")

    print(f"{len(windows)} pitch windows, {len(segs)} box frames, best of {args.repeat}")
    print(f"{'kernel':<15}" + "".join(f"{n:>12}" for n in backends) + ("     speedup" if len(backends) > 1 else ""))
    for kernel in ("pitch_track", "draw_segments"):
        row = f"{kernel:<15}" + "".join(f"{results[n][kernel] * 1e3:>10.2f}ms" for n in backends)
        if len(backends) > 1:
            row += f"{results['python'][kernel] / results['cython'][kernel]:>11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
