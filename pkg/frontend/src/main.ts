import { ApiClient } from './api.js';
import { ChatSession, replaySession } from './state.js';
import { RenderError, renderCandidates, renderHeatmap, renderHistory } from './render.js';

function byId<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const baseUrl = byId<HTMLInputElement>('base-url');
const connectBtn = byId<HTMLButtonElement>('connect');
const status = byId<HTMLElement>('status');
const personasBox = byId<HTMLTextAreaElement>('personas');
const applyPersonas = byId<HTMLButtonElement>('apply-personas');
const historyDiv = byId<HTMLElement>('history');
const banner = byId<HTMLElement>('error-banner');
const bannerText = byId<HTMLElement>('error-text');
const retryBtn = byId<HTMLButtonElement>('retry');
const candidatesDiv = byId<HTMLElement>('candidates');
const heatmapDiv = byId<HTMLElement>('heatmap');
const composer = byId<HTMLFormElement>('composer');
const messageBox = byId<HTMLInputElement>('message');
const nSelect = byId<HTMLSelectElement>('n-select');
const sdsBox = byId<HTMLInputElement>('sds');
const fdsBox = byId<HTMLInputElement>('fds');
const queueBadge = byId<HTMLElement>('queue-badge');
const replayBtn = byId<HTMLButtonElement>('replay');
const replayStatus = byId<HTMLElement>('replay-status');

let client = new ApiClient(baseUrl.value.replace(/\/$/, ''));
let session = new ChatSession(client);

function redraw(): void {
  renderHistory(historyDiv, session.history);
  queueBadge.textContent = session.pendingCount > 0 ? `${session.pendingCount} queued` : '';

  if (session.lastError) {
    bannerText.textContent = session.lastError.message;
    banner.hidden = false;
  } else {
    banner.hidden = true;
  }

  candidatesDiv.innerHTML = '';
  heatmapDiv.innerHTML = '';
  const result = session.lastResult;
  if (result && session.awaitingChoice) {
    try {
      renderCandidates(candidatesDiv, result, session.personas, (i) => {
        void session.choose(i);
      });
      renderHeatmap(heatmapDiv, result.attention, session.personas);
    } catch (e) {
      // a shape mismatch means the view and the service disagree; say so
      if (e instanceof RenderError) {
        bannerText.textContent = e.message;
        banner.hidden = false;
      } else {
        throw e;
      }
    }
  }
}

session.subscribe(redraw);

connectBtn.addEventListener('click', () => {
  client.base = baseUrl.value.replace(/\/$/, '');
  void (async () => {
    try {
      await client.health();
      const info = await client.modelInfo();
      status.textContent =
        `ok · vocab ${info.vocab_size} · ${info.hops} hops · up to ${info.k_max} personas · ` +
        `${info.n_parameters.toLocaleString()} parameters`;
    } catch (e) {
      status.textContent = e instanceof Error ? e.message : String(e);
    }
  })();
});

applyPersonas.addEventListener('click', () => {
  session.setPersonas(personasBox.value.split('\n'));
});

composer.addEventListener('submit', (ev) => {
  ev.preventDefault();
  const text = messageBox.value;
  if (!text.trim()) return;
  session.n = parseInt(nSelect.value, 10);
  session.sdsOn = sdsBox.checked;
  session.fdsOn = fdsBox.checked;
  messageBox.value = '';
  void session.send(text).catch(() => {});
});

retryBtn.addEventListener('click', () => {
  void session.retry();
});

replayBtn.addEventListener('click', () => {
  replayStatus.textContent = 'replaying...';
  void (async () => {
    try {
      const turns = await replaySession(client, session.personas, session.history, session.seedLog);
      replayStatus.textContent =
        turns.length === 0
          ? 'nothing to replay yet'
          : turns.map((t) => `turn ${t.exchange + 1}: seed ${t.seed} ✓ (candidate ${t.matchedIndex + 1})`).join(' · ');
    } catch (e) {
      replayStatus.textContent = e instanceof Error ? e.message : String(e);
    }
  })();
});

redraw();
