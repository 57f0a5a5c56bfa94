"""Convert the public credit-scoring training file to the loader's layout.

The source (``cs-training.csv``, 150000 rows, 10 features) has an unnamed
index column and the label ``SeriousDlqin2yrs``. Output columns are ``id``,
the ten features and ``label``; missing cells stay empty and are imputed on
load.

    python3 scripts/prepare_credit.py cs-training.csv data/credit1.csv
"""

import csv
import sys
from pathlib import Path

LABEL = "SeriousDlqin2yrs"


def convert(src, dst):
    with open(src, newline="") as fin:
        reader = csv.reader(fin)
        header = next(reader)
        label_at = header.index(LABEL)
        features = [i for i in range(1, len(header)) if i != label_at]
        Path(dst).parent.mkdir(parents=True, exist_ok=True)
        with open(dst, "w", newline="") as fout:
            w = csv.writer(fout)
            w.writerow(["id"] + [header[i] for i in features] + ["label"])
            rows = 0
            for row in reader:
                if not row:
                    continue
                w.writerow([row[0]] + [row[i] for i in features] + [row[label_at]])
                rows += 1
    return rows


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit("usage: prepare_credit.py SOURCE.csv DEST.csv")
    print(f"wrote {convert(sys.argv[1], sys.argv[2])} rows to {sys.argv[2]}")
