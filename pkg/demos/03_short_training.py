"""A couple of minutes of joint training with the hierarchical agent.

Agents spawn on the straight four-lane road and share one network.  Each tick
every agent scores all candidate (behavior, region) pairs with the critic,
picks the best, and samples a goal inside the chosen region; PPO updates the
shared parameters from each agent's rollout.  The reward constants are the
scaled ones from ``configs/smoke.json``, so a successful episode is worth
between +1 and +1.5 and a collision between -1 and -0.5.

Training runs with the controller's speed floor removed.  Under the default
5 m/s floor an untrained network already drifts every agent into the goal box;
without it the untrained network parks short of the road end, so what the
agent does here it has learned.  With seed 3 the moving average passes 0.5
after about 9k environment steps and training stops there.

    python demos/03_short_training.py [out_dir] [env_steps]
"""
import sys
import time
from pathlib import Path

from shrl.config import load_config
from shrl.plots import training_curve_svg
from shrl.policy_net import SHRLNet
from shrl.trainer import evaluate, joint_train, seed_streams

root = Path(__file__).resolve().parents[1]
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 20_000
out.mkdir(parents=True, exist_ok=True)

zero_floor = "scenario.control_speed_limits=[0, 30]"
cfg = load_config(root / "configs" / "smoke.json", [f"train.max_env_steps={steps}", "seed=3", zero_floor])
net = SHRLNet(cfg.net, seed=seed_streams(cfg.seed)["init"])
print(f"network: {sum(p.data.size for p in net.parameters().values())} parameters, design {cfg.net.design}")


def progress(rec, log):
    if rec.episode % 5 == 0:
        print(f"episode {rec.episode:4d}  env steps {log.env_steps:6d}  return {rec.ret:7.3f}  "
              f"moving avg {rec.moving_avg:7.3f}  {rec.cause}", flush=True)


t0 = time.perf_counter()
log = joint_train(cfg.env_config(), net, cfg.train_config(), progress)
print(f"\n{len(log.rows)} episodes, {log.env_steps} env steps, {log.updates} updates, "
      f"{time.perf_counter() - t0:.0f} s; final moving average {log.moving_avg:.3f}")

rows = log.rows
(out / "training_curve.svg").write_text(training_curve_svg(
    [r.episode for r in rows], [r.ret for r in rows], [r.moving_avg for r in rows], title="StraightFour"))

# Sampled goals keep the trained agent moving without the floor.  The mean goal
# still parks short of the road end there, so greedy runs use the default floor.
default_floor = load_config(root / "configs" / "smoke.json")
for name, env, policy in (("sampled, no floor", cfg, "sample"), ("greedy, 5 m/s floor", default_floor, "greedy")):
    s = evaluate(env.env_config(), 10, net, policy, seed=100)
    print(f"{name:20s} success {s.success_rate:.2f}  collisions {s.collision_rate:.2f}  "
          f"mean return {s.mean_return:.3f}  mean travel time {s.mean_travel_time:.1f} s")
print(f"training curve written to {out / 'training_curve.svg'}")
