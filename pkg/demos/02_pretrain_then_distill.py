"""
Pre-train a teacher, then distill it into a property predictor
===============================================================

A one-seed version of the distillation experiment; takes about a minute.
The teacher here uses only the node-level losses, which are the ones the
synthetic corpus can actually teach (see 03_which_teacher_helps.py).
"""
import time

from crystalkd import DistillConfig, Teacher, TrainConfig, eval_mae, generate_synthetic, run_pretrain
from crystalkd.distill import train_predictor

t0 = time.time()
corpus = generate_synthetic(256, seed=100)
pre = run_pretrain(corpus, TrainConfig(epochs=30, batch_size=32, lr=0.003, seed=0, mask="node"),
                   progress=lambda r: r.epoch % 10 == 0 and print(f"  epoch {r.epoch} loss {r.total:.4f}"))
teacher = Teacher(pre.store, pre.encoder)
print(f"teacher trained in {time.time() - t0:.0f}s")

# labelled data is scarce: 64 training graphs
train = generate_synthetic(64, 1000, prefix="tr")
val = generate_synthetic(32, 2000, prefix="va")
test = generate_synthetic(128, 3000, prefix="te")

for delta in (1.0, 0.5):
    res = train_predictor(train, val, teacher if delta < 1 else None,
                          DistillConfig(delta=delta, epochs=100, batch_size=16, learning_rate=0.003))
    label = "vanilla  " if delta == 1 else "distilled"
    print(f"{label} delta={delta}: best epoch {res.best_epoch:3d}, test MAE {eval_mae(res.student, test):.3f}")

# the teacher is never updated
print("teacher digest", teacher.store.digest()[:16])
