import sys

sys.path.insert(0, "tests")
import numpy as np

from metafew.meta import MetaTrainConfig, meta_train, run_meta_episode
from metafew.tasks import episode_rng
from test_meta import planted_setup

_, sampler, model = planted_setup(k=4, q=2)
cfg = MetaTrainConfig(
    n_episodes=400,
    tasks_per_batch=4,
    adaptation_steps=3,
    outer_lr=0.2,
    inner_batch_size=8,
    seed=11,
)
trained, rows = meta_train(model, cfg, sampler=sampler)
for i in range(0, len(rows), 40):
    r = rows[i]
    print(
        "step", r["step"], "val_loss", r["val_loss"], "acc", r["val_acc"],
        "a_emb %.5f" % r["alpha_embedding"], "a_wb %.5f" % r["alpha_softmax_Wb"],
        "a_hphi %.5f" % r["alpha_h_phi"],
    )
accs = []
for i in range(40):
    ep = sampler.sample_smlmt(episode_rng(999, i))
    _, _, stats = run_meta_episode(trained, ep, 3, 8, episode_rng(999, i, stream=1), train_mode=False)
    accs.append(stats.val_acc)
print("eval acc after:", np.mean(accs))
