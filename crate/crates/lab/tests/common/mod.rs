// SPDX-License-Identifier: MIT OR Apache-2.0

#![allow(dead_code)]

use std::path::Path;

/// A small experiment that runs end to end in seconds.
pub fn tiny_toml(out_dir: &Path, train_steps: usize) -> String {
    format!(
        r#"
[world]
n_subjects = 20
n_relations = 3
n_objects = 15
n_facts = 50
n_edit_candidates = 8
n_locality = 10
vocab_size = 64

[model]
n_layers = 3
d_model = 32
n_heads = 4
d_mlp = 64
vocab_size = 64
max_seq_len = 12
seed = 2

[train]
steps = {train_steps}
batch_size = 32
lr = 0.003
warmup_steps = 20
eval_every = 200

[trace]
n_probes = 5

[covariance]
n_samples = 100

[edit]
t = 4

[edit.plan]
contexts = 2

[edit.plan.value]
steps = 10

[eval]
gen_len = 5

[sweep]
alphas = [0.0, 0.5, 1.0]
ts = [4]

[paths]
out_dir = "{}"
"#,
        out_dir.display()
    )
}
