/**
 * Minimal RFC-4180 CSV reader for rangelab outputs.
 *
 * Handles quoted fields, CRLF and LF line endings. Returns rows of raw
 * strings; numeric interpretation is left to the figure renderers so that
 * nothing is silently coerced.
 */

export type Row = Record<string, string>;

export function parseCsv(text: string): Row[] {
  const records: string[][] = [];
  let field = "";
  let record: string[] = [];
  let inQuotes = false;
  let i = 0;
  while (i < text.length) {
    const ch = text[i];
    if (inQuotes) {
      if (ch === '"') {
        if (text[i + 1] === '"') {
          field += '"';
          i += 2;
          continue;
        }
        inQuotes = false;
        i += 1;
        continue;
      }
      field += ch;
      i += 1;
      continue;
    }
    if (ch === '"') {
      inQuotes = true;
      i += 1;
      continue;
    }
    if (ch === ",") {
      record.push(field);
      field = "";
      i += 1;
      continue;
    }
    if (ch === "\r" && text[i + 1] === "\n") {
      record.push(field);
      records.push(record);
      field = "";
      record = [];
      i += 2;
      continue;
    }
    if (ch === "\n") {
      record.push(field);
      records.push(record);
      field = "";
      record = [];
      i += 1;
      continue;
    }
    field += ch;
    i += 1;
  }
  if (field.length > 0 || record.length > 0) {
    record.push(field);
    records.push(record);
  }
  if (records.length === 0) {
    throw new Error("empty CSV");
  }
  const header = records[0];
  const rows: Row[] = [];
  for (const rec of records.slice(1)) {
    if (rec.length === 1 && rec[0] === "") continue;
    if (rec.length !== header.length) {
      throw new Error(
        `ragged CSV row: expected ${header.length} fields, got ${rec.length}`,
      );
    }
    const row: Row = {};
    header.forEach((name, idx) => {
      row[name] = rec[idx];
    });
    rows.push(row);
  }
  return rows;
}

export function num(row: Row, key: string): number {
  const raw = row[key];
  if (raw === undefined) {
    throw new Error(`missing column '${key}'`);
  }
  const value = Number(raw);
  if (!Number.isFinite(value)) {
    throw new Error(`non-numeric value '${raw}' in column '${key}'`);
  }
  return value;
}

export function requireColumns(rows: Row[], columns: string[]): void {
  if (rows.length === 0) {
    throw new Error("no data rows");
  }
  for (const col of columns) {
    if (!(col in rows[0])) {
      throw new Error(`schema mismatch: column '${col}' not found`);
    }
  }
}
