"""Confusion matrix to the three-class precision/recall/F1 table.

Run: python demos/metrics_report.py
"""
from seqformer.metrics import accumulate, f1_score, format_report, round_half_up, summary

# unequal class sizes so the weighted average differs from the macro one
labels = [0] * 14 + [1] * 10 + [2] * 6
preds = [0] * 13 + [1] + [1] * 6 + [2] * 2 + [0] * 2 + [2] * 3 + [1] * 3
cm = accumulate(preds, labels)
print(cm.counts)
print(format_report(summary(cm)))
print()
print(format_report(summary(cm, weighted=True)))

# two-decimal inputs give 0.1259, which prints as 0.13
print("\nf1(0.10, 0.17) =", f1_score(0.10, 0.17), "->", round_half_up(f1_score(0.10, 0.17)))
