import sys
import time

import numpy as np

from metafew.corpus import PipelineConfig, build_index, ingest_corpus
from metafew.encoder import EncoderConfig
from metafew.fixtures import make_planted_corpus
from metafew.meta import GeneratorConfig, MetaTrainConfig, init_model, meta_train, run_meta_episode
from metafew.tasks import EpisodeSampler, SamplerConfig, episode_rng

N_EPISODES = int(sys.argv[1]) if len(sys.argv) > 1 else 200
BETA = float(sys.argv[2]) if len(sys.argv) > 2 else 0.03
FAMILIES = int(sys.argv[3]) if len(sys.argv) > 3 else 8

text = make_planted_corpus(n_families=FAMILIES, sentences_per_family=50, seed=0)
store = ingest_corpus(text, PipelineConfig(max_seq_len=32, line_mode=True))
index = build_index(store, 40)
print("sentences:", len(store.sentences), "eligible:", len(index.eligible_words))

cfg = SamplerConfig(n_way_choices=(2, 3, 4))
sampler = EpisodeSampler(store, index, cfg)
enc_cfg = EncoderConfig(vocab_size=store.vocab_size, model_dim=64, ff_dim=256,
                        n_layers=4, n_heads=4, max_seq_len=32, dropout=0.1)
model = init_model(enc_cfg, GeneratorConfig(model_dim=64, gen_dim=32), seed=7, outer_lr=BETA)

tcfg = MetaTrainConfig(n_episodes=N_EPISODES, tasks_per_batch=4, adaptation_steps=7,
                       outer_lr=BETA, inner_batch_size=16, seed=21)
t0 = time.time()
trained, rows = meta_train(model, tcfg, sampler=sampler)
dt = time.time() - t0
print(f"{N_EPISODES} episodes in {dt:.0f}s ({dt / N_EPISODES * 1000:.0f} ms/ep)")
for i in range(0, len(rows), max(1, len(rows) // 10)):
    r = rows[i]
    print("step", r["step"], "prov", r["provenance"][:12], "val_loss", r["val_loss"],
          "acc", r["val_acc"], "a_wb %.4f" % r["alpha_softmax_Wb"],
          "a_emb %.4f" % r["alpha_embedding"])

# held-out eval on 2-way episodes, eval mode
eval_cfg = SamplerConfig(n_way_choices=(2,))
eval_sampler = EpisodeSampler(store, index, eval_cfg)
correct = total = 0
t1 = time.time()
for i in range(50):
    ep = eval_sampler.sample_smlmt(episode_rng(31337, i))
    _, _, stats = run_meta_episode(trained, ep, 7, 16, episode_rng(31337, i, stream=1),
                                   train_mode=False)
    n_q = len(ep.query_tokens)
    correct += stats.val_acc * n_q
    total += n_q
print(f"heldout 2-way query acc: {correct / total:.3f} over {total} preds ({time.time()-t1:.0f}s)")
