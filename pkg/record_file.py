import csv
import json
import os


def ensure_dir(folder):
    if folder:
        os.makedirs(folder, exist_ok=True)
    return folder


class DatasetError(ValueError):
    """Raised when a persisted file cannot be parsed; carries the line number"""

    def __init__(self, path, line_number, reason):
        self.path = path
        self.line_number = line_number
        super(DatasetError, self).__init__('{0}:{1}: {2}'.format(path, line_number, reason))


def dumps(obj):
    # compact, key order as built, floats in shortest round-trip form
    return json.dumps(obj, ensure_ascii=False, allow_nan=False, separators=(',', ':'))


class JsonlFile(object):
    """
    Class for write records in .jsonl file, one JSON document per line
    """

    def __init__(self):
        self._jsonl_file = None
        self._jsonl_file_name = ''
        self._count = 0

    def create_file(self, folder_for_save, file_name):
        ensure_dir(folder_for_save)
        self._jsonl_file_name = os.path.join(folder_for_save, file_name)
        self._open_file(self._jsonl_file_name, mode='w')
        self._count = 0
        pass

    def _open_file(self, file_path, mode):
        self._jsonl_file = open(file_path, mode, encoding='utf-8', newline='\n')
        pass

    def _close_file(self):
        self._jsonl_file.close()
        pass

    def write_record(self, record):
        print(dumps(record), file=self._jsonl_file)
        self._count += 1
        pass

    def stop_writing(self):
        self._close_file()
        return self._count

    def read_records(self, file_path):
        # yields (line number, record); blank lines are skipped
        self._open_file(file_path, mode='r')
        try:
            for i, line in enumerate(self._jsonl_file, start=1):
                if not line.strip():
                    continue
                try:
                    yield i, json.loads(line)
                except json.JSONDecodeError as e:
                    raise DatasetError(file_path, i, 'invalid JSON ({0})'.format(e.msg))
        finally:
            self._close_file()

    def get_filename(self):
        return self._jsonl_file_name


def write_json(path, obj):
    ensure_dir(os.path.dirname(path))
    with open(path, 'w', encoding='utf-8', newline='\n') as fp:
        fp.write(json.dumps(obj, ensure_ascii=False, allow_nan=False, indent=1))
        fp.write('\n')
    return path


def read_json(path):
    with open(path, 'r', encoding='utf-8') as fp:
        try:
            return json.loads(fp.read())
        except json.JSONDecodeError as e:
            raise DatasetError(path, e.lineno, 'invalid JSON ({0})'.format(e.msg))


def write_csv(path, header, rows):
    ensure_dir(os.path.dirname(path))
    with open(path, 'w', encoding='utf-8', newline='') as fp:
        writer = csv.writer(fp, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow(['' if row.get(key) is None else row[key] for key in header])
    return path


def read_csv(path):
    with open(path, 'r', encoding='utf-8', newline='') as fp:
        return list(csv.DictReader(fp))
