import sys

sys.path.insert(0, "tests")
import numpy as np

from metafew.meta import generate_softmax, run_meta_episode
from metafew.tasks import episode_rng
from test_meta import planted_setup

_, sampler, model = planted_setup(k=4, q=2)
print("g_psi.w2 std:", model.gen["g_psi.w2"].value.std())

ep = sampler.sample_smlmt(episode_rng(0, 0))
sup, qry = ep.tokens_by_class()
w, b = generate_softmax(model, sup)
print("W stats:", w.shape, np.abs(w).mean(), "b:", b)

q, qa, stats = run_meta_episode(model, ep, 3, 8, episode_rng(0, 0, stream=1))
print("inner losses:", stats.inner_losses)
print("val_loss:", stats.val_loss, "val_acc:", stats.val_acc)
for name in ["embedding.tok", "g_psi.w2", "layer0.ff.w1", "final_ln.gain"]:
    print(name, "q norm:", np.abs(q[name]).max())
print("q_alpha:", {k: f"{v:.3e}" for k, v in qa.items()})
