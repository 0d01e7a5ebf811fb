/**
 * The five figure kinds.
 *
 * Renderers draw exactly the numbers in the CSV. The only computations
 * allowed here are axis transforms (ranges, pixel scaling, log-axis
 * labels); fitted lines come from the fit columns the experiment wrote,
 * never from refitting the points.
 */

import { num, requireColumns, Row } from "./csv.js";
import { fmt, linearScale, plotFrame, SvgDoc } from "./svg.js";

export type FigureKind =
  | "rate-fit"
  | "vn-projection"
  | "cap-volume"
  | "clt-hist"
  | "mgf";

export function render(kind: FigureKind, rows: Row[]): string {
  switch (kind) {
    case "rate-fit":
      return rateFit(rows);
    case "vn-projection":
      return vnProjection(rows);
    case "cap-volume":
      return capVolume(rows);
    case "clt-hist":
      return cltHist(rows);
    case "mgf":
      return mgf(rows);
    default:
      throw new Error(`unknown figure kind '${kind}'`);
  }
}

function extent(values: number[], pad = 0.06): [number, number] {
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  const span = hi - lo || Math.abs(hi) || 1;
  return [lo - pad * span, hi + pad * span];
}

function rateFit(rows: Row[]): string {
  requireColumns(rows, ["rate_coord", "log_p", "se_log", "slope",
    "intercept", "r2"]);
  const pts = rows
    .filter((r) => r.log_p !== "" && Number.isFinite(Number(r.log_p)))
    .map((r) => ({
      x: num(r, "rate_coord"),
      y: num(r, "log_p"),
      se: num(r, "se_log"),
    }));
  if (pts.length === 0) throw new Error("no finite points to draw");
  const slope = num(rows[0], "slope");
  const intercept = num(rows[0], "intercept");
  const r2 = num(rows[0], "r2");
  const frame = plotFrame();
  const xs = linearScale(...extent(pts.map((p) => p.x)), frame.x0, frame.x1);
  const ys = linearScale(
    ...extent(pts.flatMap((p) => [p.y - 2 * p.se, p.y + 2 * p.se])),
    frame.y0,
    frame.y1,
  );
  const doc = new SvgDoc(
    `tail rate fit: slope=${slope.toFixed(2)}, R2=${r2.toFixed(3)}`,
  );
  doc.axes(xs, ys, "rate coordinate", "log tail probability");
  // two-sigma band around the fitted line, from the stored fit columns
  const bandSe = pts.reduce((acc, p) => acc + p.se, 0) / pts.length;
  const [xLo, xHi] = xs.domain;
  const corners = [
    [xLo, intercept + slope * xLo + 2 * bandSe],
    [xHi, intercept + slope * xHi + 2 * bandSe],
    [xHi, intercept + slope * xHi - 2 * bandSe],
    [xLo, intercept + slope * xLo - 2 * bandSe],
  ];
  doc.push(
    `<polygon points="${corners
      .map(([px, py]) => `${fmt(xs(px))},${fmt(ys(py))}`)
      .join(" ")}" fill="#d7e3f4" stroke="none"/>`,
  );
  doc.push(
    `<line x1="${fmt(xs(xLo))}" y1="${fmt(ys(intercept + slope * xLo))}" ` +
      `x2="${fmt(xs(xHi))}" y2="${fmt(ys(intercept + slope * xHi))}" ` +
      `stroke="#1f77b4" stroke-width="1.5"/>`,
  );
  for (const p of pts) {
    doc.push(
      `<line x1="${fmt(xs(p.x))}" y1="${fmt(ys(p.y - p.se))}" ` +
        `x2="${fmt(xs(p.x))}" y2="${fmt(ys(p.y + p.se))}" ` +
        `stroke="#d62728" stroke-width="1"/>`,
    );
    doc.push(
      `<circle cx="${fmt(xs(p.x))}" cy="${fmt(ys(p.y))}" r="3" ` +
        `fill="#d62728"/>`,
    );
  }
  return doc.render();
}

function vnProjection(rows: Row[]): string {
  requireColumns(rows, ["x", "y", "count"]);
  const cells = rows.map((r) => ({
    x: num(r, "x"),
    y: num(r, "y"),
    c: num(r, "count"),
  }));
  const frame = plotFrame();
  const xsVals = cells.map((c) => c.x);
  const ysVals = cells.map((c) => c.y);
  const step = inferStep(xsVals.concat(ysVals));
  const xs = linearScale(
    Math.min(...xsVals) - step,
    Math.max(...xsVals) + step,
    frame.x0,
    frame.x1,
  );
  const ys = linearScale(
    Math.min(...ysVals) - step,
    Math.max(...ysVals) + step,
    frame.y0,
    frame.y1,
  );
  const cMax = Math.max(...cells.map((c) => c.c)) || 1;
  const doc = new SvgDoc("occupancy of the dense region (2d projection)");
  doc.axes(xs, ys, "first coordinate", "second coordinate");
  const w = Math.abs(xs(step) - xs(0));
  const h = Math.abs(ys(step) - ys(0));
  for (const cell of cells) {
    const shade = cell.c / cMax;
    const level = Math.round(240 - 200 * shade);
    doc.push(
      `<rect x="${fmt(xs(cell.x) - w / 2)}" y="${fmt(ys(cell.y) - h / 2)}" ` +
        `width="${fmt(w)}" height="${fmt(h)}" ` +
        `fill="rgb(${level},${Math.round(level * 0.6 + 60)},255)"/>`,
    );
  }
  return doc.render();
}

function inferStep(values: number[]): number {
  const uniq = Array.from(new Set(values)).sort((a, b) => a - b);
  let step = Infinity;
  for (let i = 1; i < uniq.length; i += 1) {
    const gap = uniq[i] - uniq[i - 1];
    if (gap > 0 && gap < step) step = gap;
  }
  return Number.isFinite(step) ? step : 1;
}

function capVolume(rows: Row[]): string {
  requireColumns(rows, ["size", "cap_exact", "ratio_to_volume_power"]);
  const pts = rows.map((r) => ({
    x: Math.log(num(r, "size")),
    y: Math.log(num(r, "cap_exact")),
    mc: r.cap_mc !== undefined && r.cap_mc !== ""
      ? Math.log(num(r, "cap_mc"))
      : null,
  }));
  const frame = plotFrame();
  const xs = linearScale(...extent(pts.map((p) => p.x)), frame.x0, frame.x1);
  const yVals = pts.flatMap((p) => (p.mc === null ? [p.y] : [p.y, p.mc]));
  const ys = linearScale(...extent(yVals), frame.y0, frame.y1);
  const doc = new SvgDoc("capacity against set size (log-log)");
  doc.axes(xs, ys, "log |set|", "log capacity");
  for (const p of pts) {
    if (p.mc !== null) {
      doc.push(
        `<circle cx="${fmt(xs(p.x))}" cy="${fmt(ys(p.mc))}" r="3.5" ` +
          `fill="none" stroke="#2ca02c" stroke-width="1"/>`,
      );
    }
    doc.push(
      `<circle cx="${fmt(xs(p.x))}" cy="${fmt(ys(p.y))}" r="2.5" ` +
        `fill="#1f77b4"/>`,
    );
  }
  return doc.render();
}

function cltHist(rows: Row[]): string {
  requireColumns(rows, ["bin_lo", "bin_hi", "count", "total", "normal_mass"]);
  const bins = rows.map((r) => ({
    lo: num(r, "bin_lo"),
    hi: num(r, "bin_hi"),
    density:
      num(r, "count") / num(r, "total") / (num(r, "bin_hi") - num(r, "bin_lo")),
    normal:
      num(r, "normal_mass") / (num(r, "bin_hi") - num(r, "bin_lo")),
  }));
  const frame = plotFrame();
  const xs = linearScale(bins[0].lo, bins[bins.length - 1].hi, frame.x0,
    frame.x1);
  const peak = Math.max(...bins.map((b) => Math.max(b.density, b.normal)));
  const ys = linearScale(0, peak * 1.08, frame.y0, frame.y1);
  const doc = new SvgDoc("standardized range against the unit normal");
  doc.axes(xs, ys, "(|R| - mean) / sd", "density");
  for (const b of bins) {
    doc.push(
      `<rect x="${fmt(xs(b.lo))}" y="${fmt(ys(b.density))}" ` +
        `width="${fmt(xs(b.hi) - xs(b.lo))}" ` +
        `height="${fmt(ys(0) - ys(b.density))}" ` +
        `fill="#9ecae1" stroke="#ffffff" stroke-width="0.5"/>`,
    );
  }
  const path = bins
    .map(
      (b, i) =>
        `${i === 0 ? "M" : "L"}${fmt(xs((b.lo + b.hi) / 2))},` +
        `${fmt(ys(b.normal))}`,
    )
    .join(" ");
  doc.push(
    `<path d="${path}" fill="none" stroke="#d62728" stroke-width="1.5"/>`,
  );
  return doc.render();
}

function mgf(rows: Row[]): string {
  requireColumns(rows, ["theta", "scaled_log_mgf", "gaussian_ref"]);
  const pts = rows.map((r) => ({
    x: num(r, "theta"),
    y: num(r, "scaled_log_mgf"),
    ref: num(r, "gaussian_ref"),
  }));
  const frame = plotFrame();
  const xs = linearScale(...extent(pts.map((p) => p.x)), frame.x0, frame.x1);
  const ys = linearScale(
    ...extent(pts.flatMap((p) => [p.y, p.ref, 0])),
    frame.y0,
    frame.y1,
  );
  const doc = new SvgDoc("scaled log moment generating function");
  doc.axes(xs, ys, "theta", "(n / zeta^2) log MGF");
  const refPath = pts
    .map(
      (p, i) => `${i === 0 ? "M" : "L"}${fmt(xs(p.x))},${fmt(ys(p.ref))}`,
    )
    .join(" ");
  doc.push(
    `<path d="${refPath}" fill="none" stroke="#d62728" ` +
      `stroke-width="1.5" stroke-dasharray="5 3"/>`,
  );
  for (const p of pts) {
    doc.push(
      `<circle cx="${fmt(xs(p.x))}" cy="${fmt(ys(p.y))}" r="3" ` +
        `fill="#1f77b4"/>`,
    );
  }
  return doc.render();
}
