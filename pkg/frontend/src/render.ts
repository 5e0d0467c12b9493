/**
 * DOM rendering for candidates, the attention heatmap, and the per-token
 * mixture-weight sparkline. Raw values from the service land in data-value
 * attributes untouched; only the visual encoding normalizes.
 */

import { GenerateResponse, ResponseItem } from './api.js';

export class RenderError extends Error {
  constructor(message: string) {
    super(message);
    this.name = 'RenderError';
  }
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

/** Badge naming the persona a candidate expressed, or "none". */
function personaBadge(item: ResponseItem, personas: string[]): HTMLElement {
  if (item.selected_persona === null) {
    return el('span', 'badge badge-none', 'persona: none');
  }
  const idx = item.selected_persona;
  if (idx < 0 || idx >= personas.length) {
    throw new RenderError(`selected persona ${idx} out of range for ${personas.length} personas`);
  }
  const badge = el('span', 'badge', `P${idx + 1}`);
  badge.title = personas[idx]!;
  return badge;
}

/**
 * One bar per decoded token, height proportional to the persona-word
 * mixture weight at that step. All-zero traces render as a flat zero bar.
 */
export function renderSparkline(alphas: number[], tokens: string[]): HTMLElement {
  const spark = el('div', 'sparkline');
  alphas.forEach((a, i) => {
    const bar = el('div', 'spark-bar');
    bar.style.height = `${Math.round(Math.max(0, Math.min(1, a)) * 100)}%`;
    bar.dataset.value = String(a);
    bar.title = `${tokens[i] ?? '?'}: ${a.toFixed(4)}`;
    spark.appendChild(bar);
  });
  return spark;
}

/**
 * Candidate bubbles with persona badge, fds flag, and sparkline. `onChoose`
 * wires the manual pick; rendering never auto-selects.
 */
export function renderCandidates(
  container: HTMLElement,
  result: GenerateResponse,
  personas: string[],
  onChoose: (index: number) => void,
): void {
  container.innerHTML = '';
  result.responses.forEach((item, i) => {
    const bubble = el('div', 'candidate');
    bubble.dataset.index = String(i);

    const header = el('div', 'candidate-header');
    header.appendChild(el('span', 'candidate-no', `#${i + 1}`));
    header.appendChild(personaBadge(item, personas));
    if (item.fds_used) header.appendChild(el('span', 'badge badge-fds', 'fds'));
    const zn = result.z_norms[i];
    if (zn !== undefined) header.appendChild(el('span', 'znorm', `|z| ${zn.toFixed(2)}`));
    bubble.appendChild(header);

    bubble.appendChild(el('div', 'candidate-text', item.text || '(empty)'));
    bubble.appendChild(renderSparkline(result.type_trace[i] ?? [], item.tokens));

    const pick = el('button', 'pick', 'use this reply');
    pick.addEventListener('click', () => onChoose(i));
    bubble.appendChild(pick);

    container.appendChild(bubble);
  });
}

/**
 * hops x k attention heatmap, one row per hop, one column per persona.
 * Cell shading is normalized by its row sum so rows are visually
 * comparable; data-value keeps the raw JSON number.
 */
export function renderHeatmap(
  container: HTMLElement,
  attention: number[][],
  personas: string[],
): void {
  container.innerHTML = '';
  if (personas.length === 0 && attention.length === 0) {
    container.appendChild(el('div', 'heatmap-empty', 'no personas, no memory to attend over'));
    return;
  }
  for (const row of attention) {
    if (row.length !== personas.length) {
      throw new RenderError(
        `attention row has ${row.length} columns but there are ${personas.length} personas`,
      );
    }
  }
  const table = el('table', 'heatmap');
  const head = el('tr');
  head.appendChild(el('th'));
  personas.forEach((p, j) => {
    const th = el('th', undefined, `P${j + 1}`);
    th.title = p;
    head.appendChild(th);
  });
  table.appendChild(head);

  attention.forEach((row, hop) => {
    const tr = el('tr');
    tr.appendChild(el('th', undefined, `hop ${hop + 1}`));
    const rowSum = row.reduce((a, b) => a + b, 0) || 1;
    row.forEach((v) => {
      const td = el('td', 'cell');
      td.dataset.value = String(v);
      td.style.backgroundColor = `rgba(47, 111, 235, ${(v / rowSum).toFixed(3)})`;
      td.textContent = v.toFixed(2);
      td.title = v.toFixed(6);
      tr.appendChild(td);
    });
    table.appendChild(tr);
  });
  container.appendChild(table);
}

export function renderHistory(container: HTMLElement, turns: { speaker: string; text: string }[]): void {
  container.innerHTML = '';
  for (const turn of turns) {
    container.appendChild(el('div', `turn turn-${turn.speaker}`, turn.text));
  }
  container.scrollTop = container.scrollHeight;
}
