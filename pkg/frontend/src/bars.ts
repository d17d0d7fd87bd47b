/** Horizontal probability bars with percentages that always total 100.0. */

export interface BarRow {
  label: string;
  /** percentage with one decimal, allocated so the column sums to 100.0 */
  percent: number;
}

/** Convert probabilities to one-decimal percentages summing to exactly
 * 100.0 (largest-remainder allocation in tenths of a percent). */
export function toPercentages(probs: Record<string, number>): BarRow[] {
  const entries = Object.entries(probs);
  const total = entries.reduce((acc, [, p]) => acc + p, 0) || 1;
  const exact = entries.map(([label, p]) => ({ label, tenths: (1000 * p) / total }));
  const floored = exact.map((e) => ({ label: e.label, tenths: Math.floor(e.tenths) }));
  let remainder = 1000 - floored.reduce((acc, e) => acc + e.tenths, 0);
  const order = exact
    .map((e, i) => ({ i, frac: e.tenths - Math.floor(e.tenths) }))
    .sort((a, b) => b.frac - a.frac || a.i - b.i);
  for (let k = 0; remainder > 0; k = (k + 1) % order.length, remainder--) {
    floored[order[k].i].tenths += 1;
  }
  return floored
    .map((e) => ({ label: e.label, percent: e.tenths / 10 }))
    .sort((a, b) => b.percent - a.percent || a.label.localeCompare(b.label));
}

export function renderBars(root: HTMLElement, probs: Record<string, number>): void {
  const rows = toPercentages(probs);
  root.innerHTML = "";
  for (const row of rows) {
    const line = document.createElement("div");
    line.className = "bar-row";

    const label = document.createElement("span");
    label.className = "bar-label";
    label.textContent = row.label;

    const track = document.createElement("div");
    track.className = "bar-track";
    const fill = document.createElement("div");
    fill.className = "bar-fill";
    fill.style.width = `${row.percent}%`;
    track.appendChild(fill);

    const value = document.createElement("span");
    value.className = "bar-value";
    value.textContent = `${row.percent.toFixed(1)}%`;

    line.append(label, track, value);
    root.appendChild(line);
  }
}
