# %% [markdown]
# # Graphs and the LF-MMI objective on a toy lexicon
#
# Four phones, five words.  We build the decoding graph, a denominator from a
# phone bigram, a numerator with tolerance 1 and evaluate the objective.

# %%
import numpy as np

from semisup_lfmmi.automata import SymbolTable, enumerate_paths, write_fst
from semisup_lfmmi.lexicon import build_decoding_graph, compile_L, load_lexicon
from semisup_lfmmi.lfmmi import (
    build_denominator, lfmmi_objective, numerator_from_transcript, split_chunks,
)
from semisup_lfmmi.lm import compile_grammar, train_ngram

phones = SymbolTable(["sil", "a", "b", "c"])
lex = load_lexicon("x a b\ny c a\nz b\nz b c\nw a b c\n", phones)

# %% [markdown]
# ## Decoding graph
# Each compilation stage is recorded with its size.

# %%
words = lex.word_symbols(["<unk>"])
lm = train_ngram([["x", "z"], ["y", "z"], ["x", "w"], ["w"]], 2, vocab=lex.words)
graph = build_decoding_graph(compile_L(lex, words), compile_grammar(lm, words))
for stage in graph.stages:
    print(*stage)

# %% [markdown]
# ## Denominator and numerator

# %%
phone_lm = train_ngram([["sil", "a", "b", "sil"], ["sil", "c", "a", "b", "sil"]], 2,
                       vocab=phones.symbols[1:])
den = build_denominator(phone_lm, phones)
print("denominator arcs:", den.fst.num_arcs)

ali = [("sil", 0, 2), ("a", 2, 4), ("b", 4, 6), ("sil", 6, 8)]
num = numerator_from_transcript(["x"], lex, ali, 1, utt_id="toy")
print(write_fst(num.fst))
print(len(enumerate_paths(num.fst)), "labelings within one frame of the alignment")

# %% [markdown]
# ## Objective and gradient
# The gradient rows sum to zero: numerator minus denominator occupancy.

# %%
rng = np.random.default_rng(0)
y = rng.normal(size=(8, len(phones) - 1))
obj = lfmmi_objective(y, split_chunks(num, 8), den)
print("objective per frame:", round(obj.value, 4))
print("max |row sum|:", np.abs(obj.gradient.sum(axis=1)).max())
