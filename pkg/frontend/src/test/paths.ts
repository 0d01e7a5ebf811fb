import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";

export const GOLDEN_DIR = join(
  dirname(fileURLToPath(import.meta.url)),
  "..",
  "..",
  "golden",
);

export const KIND_FILES: Record<string, string> = {
  "rate-fit": "rate_fit",
  "vn-projection": "vn_projection",
  "cap-volume": "cap_volume",
  "clt-hist": "clt_hist",
  mgf: "mgf",
};
