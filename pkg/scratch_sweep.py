import sys
import time

sys.path.insert(0, "tests")
import numpy as np

from metafew.meta import MetaTrainConfig, meta_train, run_meta_episode
from metafew.tasks import episode_rng
from test_meta import planted_setup


def eval_acc(model, sampler, n=40, g=3, bs=8, seed=999):
    accs = []
    for i in range(n):
        ep = sampler.sample_smlmt(episode_rng(seed, i))
        _, _, stats = run_meta_episode(model, ep, g, bs, episode_rng(seed, i, stream=1), train_mode=False)
        accs.append(stats.val_acc)
    return float(np.mean(accs))


for beta in [0.01, 0.03, 0.1]:
    _, sampler, model = planted_setup(k=4, q=2)
    t0 = time.time()
    cfg = MetaTrainConfig(n_episodes=600, tasks_per_batch=4, adaptation_steps=3,
                          outer_lr=beta, inner_batch_size=8, seed=11)
    trained, rows = meta_train(model, cfg, sampler=sampler)
    acc = eval_acc(trained, sampler)
    losses = [float(r["val_loss"]) for r in rows]
    print(f"beta={beta}: acc={acc:.3f} loss[0:10]={np.mean(losses[:10]):.4f} "
          f"loss[-50:]={np.mean(losses[-50:]):.4f} "
          f"a_emb={rows[-1]['alpha_embedding']:.4f} a_wb={rows[-1]['alpha_softmax_Wb']:.4f} "
          f"({time.time()-t0:.0f}s)")
