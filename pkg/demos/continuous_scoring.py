"""
Speaker-agnostic WER over two output streams
============================================

Each reference utterance is assigned to exactly one stream; the assignment
with the fewest total errors wins.
"""

from csskit.scoring import RefUtterance, continuous_eval, utterance_eval, wer

refs = [RefUtterance(0.0, 3.0, tuple("THE CAT SAT ON THE MAT".split())),
        RefUtterance(1.5, 4.0, tuple("A DOG BARKED".split())),
        RefUtterance(4.5, 7.0, tuple("IT RAINED ALL DAY".split()))]

# stream 0 carried the cat and rain sentences, stream 1 the dog
h0 = "THE CAT SAT ON A MAT IT RAINED ALL DAY".split()
h1 = "A DOG BARK".split()

res = continuous_eval([h0, h1], refs)
print("assignment", res.assignment)
for k, rep in enumerate(res.per_stream):
    print(f"stream {k}:", rep.as_dict())
print("total", res.total.as_dict())

# utterance-wise: the better of the two streams is kept
print(utterance_eval("THE CAT SAT", "THE CAT SAT ON THE MAT", "THE CAT SAT ON THE MAT").as_dict())
print(wer("A X C D", "A B C").as_dict())
