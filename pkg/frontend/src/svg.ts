/**
 * Deterministic SVG assembly.
 *
 * Every coordinate goes through a fixed-precision formatter, elements are
 * emitted in a fixed order and no timestamps or environment data enter
 * the output, so re-rendering the same inputs yields identical bytes.
 */

export const WIDTH = 640;
export const HEIGHT = 440;
export const MARGIN = { left: 64, right: 20, top: 28, bottom: 46 };

export function fmt(x: number): string {
  if (!Number.isFinite(x)) {
    throw new Error(`cannot format non-finite coordinate ${x}`);
  }
  const s = x.toFixed(2);
  return s === "-0.00" ? "0.00" : s;
}

export function fmtTick(x: number): string {
  if (x === 0) return "0";
  const a = Math.abs(x);
  if (a >= 10000 || a < 0.01) return x.toExponential(1);
  if (a >= 100) return x.toFixed(0);
  if (a >= 1) return x.toFixed(1);
  return x.toFixed(2);
}

export interface Scale {
  (value: number): number;
  domain: [number, number];
}

export function linearScale(
  lo: number,
  hi: number,
  outLo: number,
  outHi: number,
): Scale {
  const span = hi - lo || 1;
  const scale = ((value: number) =>
    outLo + ((value - lo) / span) * (outHi - outLo)) as Scale;
  scale.domain = [lo, hi];
  return scale;
}

export function ticks(lo: number, hi: number, count = 5): number[] {
  const span = hi - lo || 1;
  const step = Math.pow(10, Math.floor(Math.log10(span / count)));
  const err = (span / count) / step;
  const mult = err >= 7.5 ? 10 : err >= 3.5 ? 5 : err >= 1.5 ? 2 : 1;
  const inc = step * mult;
  const start = Math.ceil(lo / inc) * inc;
  const out: number[] = [];
  for (let v = start; v <= hi + inc * 1e-9; v += inc) {
    out.push(Math.abs(v) < inc * 1e-9 ? 0 : v);
  }
  return out;
}

export class SvgDoc {
  private parts: string[] = [];

  constructor(title: string) {
    this.parts.push(
      `<svg xmlns="http://www.w3.org/2000/svg" width="${WIDTH}" ` +
        `height="${HEIGHT}" viewBox="0 0 ${WIDTH} ${HEIGHT}">`,
      `<rect width="${WIDTH}" height="${HEIGHT}" fill="#ffffff"/>`,
      `<text x="${WIDTH / 2}" y="18" text-anchor="middle" ` +
        `font-family="Helvetica" font-size="13" fill="#222222">` +
        `${escapeXml(title)}</text>`,
    );
  }

  push(fragment: string): void {
    this.parts.push(fragment);
  }

  axes(xScale: Scale, yScale: Scale, xLabel: string, yLabel: string): void {
    const x0 = MARGIN.left;
    const x1 = WIDTH - MARGIN.right;
    const y0 = HEIGHT - MARGIN.bottom;
    const y1 = MARGIN.top;
    this.push(
      `<line x1="${x0}" y1="${y0}" x2="${x1}" y2="${y0}" ` +
        `stroke="#333333" stroke-width="1"/>`,
    );
    this.push(
      `<line x1="${x0}" y1="${y0}" x2="${x0}" y2="${y1}" ` +
        `stroke="#333333" stroke-width="1"/>`,
    );
    for (const t of ticks(xScale.domain[0], xScale.domain[1])) {
      const px = xScale(t);
      this.push(
        `<line x1="${fmt(px)}" y1="${y0}" x2="${fmt(px)}" y2="${y0 + 4}" ` +
          `stroke="#333333" stroke-width="1"/>`,
      );
      this.push(
        `<text x="${fmt(px)}" y="${y0 + 17}" text-anchor="middle" ` +
          `font-family="Helvetica" font-size="10" fill="#333333">` +
          `${fmtTick(t)}</text>`,
      );
    }
    for (const t of ticks(yScale.domain[0], yScale.domain[1])) {
      const py = yScale(t);
      this.push(
        `<line x1="${x0 - 4}" y1="${fmt(py)}" x2="${x0}" y2="${fmt(py)}" ` +
          `stroke="#333333" stroke-width="1"/>`,
      );
      this.push(
        `<text x="${x0 - 7}" y="${fmt(py + 3)}" text-anchor="end" ` +
          `font-family="Helvetica" font-size="10" fill="#333333">` +
          `${fmtTick(t)}</text>`,
      );
    }
    this.push(
      `<text x="${(x0 + x1) / 2}" y="${HEIGHT - 10}" text-anchor="middle" ` +
        `font-family="Helvetica" font-size="11" fill="#222222">` +
        `${escapeXml(xLabel)}</text>`,
    );
    this.push(
      `<text x="16" y="${(y0 + y1) / 2}" text-anchor="middle" ` +
        `font-family="Helvetica" font-size="11" fill="#222222" ` +
        `transform="rotate(-90 16 ${(y0 + y1) / 2})">` +
        `${escapeXml(yLabel)}</text>`,
    );
  }

  render(): string {
    return this.parts.join("\n") + "\n</svg>\n";
  }
}

export function escapeXml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function plotFrame(): {
  x0: number;
  x1: number;
  y0: number;
  y1: number;
} {
  return {
    x0: MARGIN.left,
    x1: WIDTH - MARGIN.right,
    y0: HEIGHT - MARGIN.bottom,
    y1: MARGIN.top,
  };
}
