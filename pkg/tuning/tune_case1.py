"""Grid search for the Case I fixture: filter tuning + map/forward quality."""
import itertools
import sys
import numpy as np
from grayboxsid import dynamics as dyn, sde, signals, filters, gpr, pipeline

true = dyn.SystemModel.chain([30, 15], [10, 5], [1000, 1000], dyn.DuffingChain(100.0), [0.05, 0.05])
known = dyn.SystemModel.chain([30, 15], [12, 4.5], [900, 850], None, [0.05, 0.05])
dt = 1 / 200

CACHE = {}

def prep(amp, mscale, seed):
    key = (amp, mscale, seed)
    if key in CACHE:
        return CACHE[key]
    force = signals.realize(signals.BandLimitedWhiteNoise(0.5, 4.0, amp, seed=11), dt, 90.0, 2)
    cfg0 = sde.SimConfig(dt=dt, duration=90.0, seed=seed, measurement_noise_std=0.0)
    tr0 = sde.simulate_taylor15(true, force, cfg0)
    a_rms = np.sqrt(np.mean(np.column_stack([tr0.channel('a1'), tr0.channel('a2')]) ** 2, axis=0))
    mstd = list(mscale * a_rms)
    cfg = sde.SimConfig(dt=dt, duration=90.0, seed=seed, measurement_noise_std=mstd)
    truth = sde.simulate_taylor15(true, force, cfg)
    X = np.column_stack([truth.channel('x1'), truth.channel('x2')])
    V = np.column_stack([truth.channel('v1'), truth.channel('v2')])
    Y = np.hstack([X, V])
    R = np.array([dyn.true_residual(true, known, dyn.AugmentedState(X[i], V[i])) for i in range(len(truth))])
    rec = sde.synthesize_measurements(truth, true, force, cfg)
    CACHE[key] = (force, truth, Y, R, rec, mstd)
    return CACHE[key]

def filter_metrics(amp, mscale, seed, qf, anchor, gamma, qs=1e-10):
    force, truth, Y, R, rec, mstd = prep(amp, mscale, seed)
    meas40 = rec.select(['a1', 'a2']).window(0, 40)
    u40 = rec.select(['f1', 'f2']).window(0, 40)
    ncfg = filters.FilterNoiseConfig(q_force=qf, q_state=qs, q_state_from_force=gamma,
                                     measurement_noise_std=mstd, displacement_anchor_std=anchor)
    est = pipeline.estimate_residual(known, meas40, u40, pipeline.FilterConfig(noise=ncfg))
    n = len(est)
    fc = [float(np.corrcoef(est.force_mean[:, d], R[:n, d])[0, 1]) for d in range(2)]
    fn = [float(np.sqrt(np.mean((est.force_mean[:, d] - R[:n, d]) ** 2)) / np.sqrt(np.mean(R[:n, d] ** 2)))
          for d in range(2)]
    return est, fc, fn

def map_metrics(est, amp, mscale, seed, restarts=2):
    force, truth, Y, R, rec, mstd = prep(amp, mscale, seed)
    gp_cfg = pipeline.GpConfig(fit=gpr.FitConfig(n_restarts=restarts, seed=0, max_iter=80),
                               feature_spec=gpr.FeatureSpec(stride=16, max_points=520),
                               training_window=40.0)
    corrected = pipeline.build_corrected_model(known, est, gp_cfg)
    m, _ = pipeline.predict_residual(corrected, Y)
    gmap = [float(np.sqrt(np.mean((m[:, d] - R[:, d]) ** 2)) / np.sqrt(np.mean(R[:, d] ** 2))) for d in range(2)]
    return corrected, gmap

def forward_metrics(corrected, amp, mscale, seed):
    force, truth, Y, R, rec, mstd = prep(amp, mscale, seed)
    pred = pipeline.predict_response(corrected, force, sde.SimConfig(dt=dt, duration=90.0, blowup=1e8))
    return [float(np.sqrt(np.mean((pred.channel(l) - truth.channel(l)) ** 2)) /
                  np.sqrt(np.mean(truth.channel(l) ** 2))) for l in ['x1', 'x2', 'v1', 'v2']]

if __name__ == "__main__":
    stage = sys.argv[1] if len(sys.argv) > 1 else "screen"
    if stage == "screen":
        grid = itertools.product(
            [200.0, 300.0, 500.0],          # amplitude
            [0.002],                        # measurement noise scale
            [0.5, 1.0, 2.0, 3.0],           # q_force
            [(None, 0.0), (1.0, 10.0), (2.0, 10.0)],  # (anchor, gamma)
        )
        for amp, ms, qf, (anchor, gamma) in grid:
            cs, ns = [], []
            for seed in [3, 5]:
                _, fc, fn = filter_metrics(amp, ms, seed, qf, anchor, gamma)
                cs.append(min(fc)); ns.append(max(fn))
            print(f'A={amp:<6} qf={qf:<4} anchor={anchor} g={gamma}: worst corr={min(cs):.3f} worst nrmse={max(ns):.3f}',
                  flush=True)
