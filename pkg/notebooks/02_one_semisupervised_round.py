# %% [markdown]
# # One semi-supervised round, both supervision modes
#
# The default supervised subset with a smaller unsupervised pool keeps this to
# a few minutes.  Both runs share a
# cache, so the corpus, seed model and first decoding pass are built once.

# %%
from semisup_lfmmi import pipeline
from semisup_lfmmi.config import ExperimentConfig

small = ExperimentConfig().replace(**{
    "corpus.unsupervised": 600, "corpus.heldout": 100,
})
cache = {}
reports = {mode: pipeline.run_experiment(small.replace(**{"supervision.mode": mode}), cache)
           for mode in ("1best", "full-lattice")}

# %% [markdown]
# ## Held-out WER per channel

# %%
for mode, rep in reports.items():
    print(rep.format())

# %% [markdown]
# ## What the two runs share
# Stage hashes agree up to selection and differ from supervision onward.

# %%
a, b = (r.stage_hashes for r in reports.values())
for stage in a:
    print(f"{stage:<14} {'same' if a[stage] == b[stage] else 'differs'}")

# %% [markdown]
# ## Selection outcome

# %%
it = reports["full-lattice"].iterations[1]
print(f"selected {it.selected} of {it.decoded}; rejected {it.rejected}; excluded {it.excluded}")
