/**
 * Regenerate the reference SVGs from the golden CSVs.
 *
 * Run after intentionally changing the renderer: `npm run regolden`.
 */

import { readFileSync, writeFileSync } from "node:fs";
import { join } from "node:path";

import { parseCsv } from "../csv.js";
import { FigureKind, render } from "../figures.js";
import { GOLDEN_DIR, KIND_FILES } from "./paths.js";

for (const [kind, stem] of Object.entries(KIND_FILES)) {
  const csv = readFileSync(join(GOLDEN_DIR, `${stem}.csv`), "utf8");
  const svg = render(kind as FigureKind, parseCsv(csv));
  writeFileSync(join(GOLDEN_DIR, `${stem}.svg`), svg, "utf8");
  process.stdout.write(`wrote golden/${stem}.svg\n`);
}
