/**
 * rangelab-plot: render a rangelab CSV into a deterministic SVG figure.
 *
 *   rangelab-plot --kind rate-fit --in rates.csv --out fig1.svg
 *
 * Reads only the CSV schemas produced by the rangelab CLI and never
 * recomputes statistics; see figures.ts for what each kind expects.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { parseCsv } from "./csv.js";
import { FigureKind, render } from "./figures.js";

const KINDS: FigureKind[] = [
  "rate-fit",
  "vn-projection",
  "cap-volume",
  "clt-hist",
  "mgf",
];

function usage(): never {
  process.stderr.write(
    `usage: rangelab-plot --kind <${KINDS.join("|")}> --in data.csv ` +
      `--out figure.svg\n`,
  );
  process.exit(2);
}

export function main(argv: string[]): number {
  let kind: string | undefined;
  let input: string | undefined;
  let output: string | undefined;
  for (let i = 0; i < argv.length; i += 1) {
    switch (argv[i]) {
      case "--kind":
        kind = argv[++i];
        break;
      case "--in":
        input = argv[++i];
        break;
      case "--out":
        output = argv[++i];
        break;
      default:
        usage();
    }
  }
  if (!kind || !input || !output) usage();
  if (!KINDS.includes(kind as FigureKind)) {
    process.stderr.write(`unknown figure kind '${kind}'\n`);
    return 2;
  }
  let svg: string;
  try {
    svg = render(kind as FigureKind, parseCsv(readFileSync(input, "utf8")));
  } catch (err) {
    process.stderr.write(`render failed: ${(err as Error).message}\n`);
    return 2;
  }
  writeFileSync(output, svg, "utf8");
  return 0;
}

if (import.meta.url === `file://${process.argv[1]}`) {
  process.exit(main(process.argv.slice(2)));
}
