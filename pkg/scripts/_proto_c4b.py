import sys, time
sys.path.insert(0, '/root/pkg/scripts')
import numpy as np
import _proto_c4 as P
from rfsplat.dataset import generate_dataset, split as split_ds
from rfsplat.renderer import AngularGrid
from rfsplat.scene import AsgLobe, GaussianPrimitive, Kind, Scene, TemporalEnvelope
from rfsplat.training import TrainConfig, train
from rfsplat.metrics import evaluate, stratify_by_dynamics

def build_truth(seed=0):
    rng = np.random.default_rng(seed)
    prims = []
    spots = [(12, 4, 3), (-9, 8, 5), (4, -13, 2), (-11, -6, 7), (10, 10, 6), (0, 14, 4)]
    for mu in spots:
        prims.append(GaussianPrimitive(
            mu0=np.array(mu, float), scale=rng.uniform(0.8, 1.6, 3),
            rotation=np.array([1.0, 0, 0, 0]), rho=rng.uniform(0.3, 0.5),
            velocity=np.zeros(3), kind=Kind.STATIC,
            lobes=P.aimed_lobes(mu, 4, rng)))
    mu_k = np.array([8.0, -10.0, 3.0])
    prims.append(GaussianPrimitive(
        mu0=mu_k, scale=np.array([1.2, 1.2, 1.2]),
        rotation=np.array([1.0, 0, 0, 0]), rho=0.4,
        velocity=np.array([0.0, 2.0, 0.0]), kind=Kind.KINEMATIC,
        lobes=P.aimed_lobes(mu_k, 4, rng, amp=(0.002, 0.004))))
    mu_t = np.array([-6.0, 9.0, 4.0])
    prims.append(GaussianPrimitive(
        mu0=mu_t, scale=np.array([1.4, 1.4, 1.4]),
        rotation=np.array([1.0, 0, 0, 0]), rho=0.55,
        velocity=np.zeros(3), kind=Kind.TRANSIENT,
        lobes=P.aimed_lobes(mu_t, 4, rng, amp=(0.02, 0.03), t_c=5.0, t_w=1.0/3.0)))
    return Scene.from_primitives(prims, eta=1.0, r_rx=1.0, t_span=(0.0, 10.0))

def run(tau_factor=6.0, noise=0.3, seed_train=0):
    grid = AngularGrid(H=24, W=48)
    truth = build_truth()
    times = np.arange(100) / 10.0
    ds = generate_dataset(truth, P.receiver_grid(), times, noise, grid, seed=3,
                          backend="numpy")
    train_ds, test_ds = split_ds(ds, "temporal", 0.7, seed=5)
    init = P.static_only_init(truth)
    cfg = TrainConfig(
        warmup_iters=400, gate_iters=1000, joint_iters=400, B=4,
        densify_interval=100, max_transients=48, backend="numpy",
        seed=seed_train, tau_factor=tau_factor,
        lr_mu0=6.4e-4, lr_log_scale=2e-2, lr_quat=2e-2, lr_rho_logit=0.1,
        lr_v_raw=4e-2, lr_lam_raw=4e-2, lr_abar_raw=0.1, lr_psi=4e-2,
        lr_eta_raw=2e-2)
    t0 = time.time()
    fitted, metrics = train(train_ds, cfg, init)
    n_trans = int(np.sum(fitted.kind == Kind.TRANSIENT))
    print("train %.0f s; K=%d, transients=%d" % (time.time() - t0, fitted.K, n_trans))
    tw = fitted.tw()
    overlap = False
    for k in np.nonzero(fitted.kind == Kind.TRANSIENT)[0]:
        for m in range(fitted.M):
            lo = fitted.t_c[k, m] - 3 * tw[k, m]
            hi = fitted.t_c[k, m] + 3 * tw[k, m]
            if hi >= 4.0 and lo <= 6.0 and fitted.abar()[k, m] > 1e-4:
                overlap = True
    print("(a) overlap [4,6]:", overlap)
    summary = evaluate(fitted, test_ds, backend="numpy")
    print("(b) median RSS err %.3f dB (mean %.3f)" % (summary.median_rss_err, summary.mean_rss_err))
    tiers = stratify_by_dynamics(test_ds, summary)
    for t in tiers:
        print("   %-8s std %.2f median %.3f" % (t["tier"], t["rss_std_mean"], t["median_rss_err_db"]))
    ratio = tiers[2]["median_rss_err_db"] / max(tiers[0]["median_rss_err_db"], 1e-9)
    print("(c) ratio %.2f" % ratio)
    tc_list = [(round(fitted.t_c[k,0],2), round(tw[k,0],2)) for k in np.nonzero(fitted.kind == Kind.TRANSIENT)[0]]
    print("transient (t_c, t_w):", tc_list)
    return overlap, summary.median_rss_err, ratio

if __name__ == "__main__":
    run(tau_factor=float(sys.argv[1]) if len(sys.argv) > 1 else 6.0)
