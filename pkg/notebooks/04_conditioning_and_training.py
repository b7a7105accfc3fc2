# %% [markdown]
# # Conditioning strategies and a short training run
#
# The same separator trains under different condition builders. Here each
# strategy gets a brief run and is then queried with held-out paraphrases.
# Runs are short, so the numbers are illustrative only.

# %%
from dataclasses import replace

from lqtse.experiments import ExperimentSpec, build_setup
from lqtse.trainer import TrainConfig, TrainData, evaluate, train

spec = ExperimentSpec(clips_per_class=20, test_clips_per_class=5, pairings=2)
setup = build_setup(spec)
labels = [setup.world.specs[k].label for k in setup.train_labels]

# %%
config = TrainConfig(steps=200, batch_size=16, val_every=0)
for strategy in ("supervised", "vanilla", "vanilla-ni", "retrieval"):
    cache = setup.caches["enriched"] if strategy.startswith("retrieval") else None
    data = TrainData(setup.train_audio, setup.audio_encoder, setup.text_encoder, cache,
                     setup.train_captions, labels, None, setup.embeddings)
    params, log = train(replace(config, strategy=strategy), data)
    rep = evaluate(params, setup.test, setup.text_encoder)
    print(f"{strategy:12s} final loss {log.losses()[-20:].mean():7.2f}   test SI-SDRi {rep.mean_si_sdri:5.2f} dB")
