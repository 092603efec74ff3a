/** Browser bootstrap: wires the store and render functions to the DOM. */

import { ApiClient } from './api.js';
import { PortalStore } from './state.js';
import { renderBuilder, renderDashboard, renderResults } from './views.js';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function download(bytes: Uint8Array, filename: string): void {
  const blob = new Blob([bytes as BlobPart], { type: 'application/json' });
  const anchor = document.createElement('a');
  anchor.href = URL.createObjectURL(blob);
  anchor.download = filename;
  anchor.click();
  URL.revokeObjectURL(anchor.href);
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get('service') ?? 'http://127.0.0.1:8420';
  const key = params.get('key') ?? 'demo-party';
  const store = new PortalStore(new ApiClient(base, key));

  const dashboard = el<HTMLDivElement>('dashboard');
  const builder = el<HTMLDivElement>('builder');
  const results = el<HTMLDivElement>('results');
  const status = el<HTMLParagraphElement>('status');

  const repaint = () => {
    if (store.session) {
      dashboard.innerHTML = renderDashboard(store.session, new Date().toISOString());
    }
    if (store.suite) {
      builder.innerHTML = renderBuilder(store.suite, (i) => store.isCached(i));
    }
    results.innerHTML = renderResults(store.rows, store.report);
  };

  el<HTMLFormElement>('open-form').addEventListener('submit', async (event) => {
    event.preventDefault();
    const decisionId = el<HTMLInputElement>('decision-id').value.trim();
    try {
      await store.open(decisionId);
      await store.loadSuite();
      status.textContent = '';
    } catch (err) {
      status.textContent = String(err);
    }
    repaint();
  });

  builder.addEventListener('click', async (event) => {
    const target = event.target as HTMLElement;
    const instanceId = target.dataset['run'];
    if (!instanceId || !store.suite) return;
    const instance = store.suite.instances.find((i) => i.instance_id === instanceId);
    if (!instance) return;
    try {
      await store.run({
        instance_id: instance.instance_id,
        class_id: instance.class_id,
        field: instance.field,
        substituted_value:
          instance.substituted_value === '__removed__' ? null : instance.substituted_value,
        remove: instance.substituted_value === '__removed__',
      });
      status.textContent = store.lastReplayed ? 'cached result: no query consumed' : '';
    } catch (err) {
      status.textContent = String(err);
    }
    repaint();
  });

  el<HTMLButtonElement>('close-session').addEventListener('click', async () => {
    try {
      await store.close();
      status.textContent = '';
    } catch (err) {
      status.textContent = String(err);
    }
    repaint();
  });

  results.addEventListener('click', async (event) => {
    const target = event.target as HTMLElement;
    if (target.dataset['export'] === undefined) return;
    const bytes = await store.exportReportBytes();
    download(bytes, `${store.session?.session_id ?? 'report'}.json`);
  });
}

boot().catch((err) => {
  document.body.insertAdjacentText('beforeend', String(err));
});
